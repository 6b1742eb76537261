//! Parser for `.xanthus` workflow documents.
//!
//! The format is line-oriented: `[section]` headers followed by `key =
//! value` pairs. Values are double-quoted strings (with `\\ \" \n \t \r`
//! escapes), triple-quoted blocks for multi-line bodies, unsigned integers,
//! lists `[..]`, and inline tables `{ k = v }`. `#` starts a comment.
//! Newlines are insignificant inside lists and tables, significant
//! elsewhere. Unknown sections and keys are errors, not warnings, so typos
//! cannot silently change an experiment.

use std::collections::BTreeMap;
use std::fmt;

use super::{
    is_valid_name, CollectorSpec, ExpectedOutput, FailurePolicy, ImageSource, Interpreter, Job,
    Mode, OrderEdge, PublishTarget, Script, ScriptSource, StagedFile, TargetKind, TaskId, TaskRef,
    VmSpec, Workflow, DEFAULT_LFS_THRESHOLD,
};

/// A parse failure with its 1-based document position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, column: usize, message: impl Into<String>) -> ParseError {
        ParseError { line, column, message: message.into() }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

impl std::error::Error for ParseError {}

type PResult<T> = Result<T, ParseError>;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Newline,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    Eq,
    Comma,
    /// Bare word: section names, keys, integers. May contain dots.
    Word(String),
    Str(String),
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/' | '@')
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Lexer<'a> {
        Lexer { chars: src.chars().peekable(), line: 1, col: 1 }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn tokenize(mut self) -> PResult<Vec<Spanned>> {
        let mut out = Vec::new();
        loop {
            let (line, col) = (self.line, self.col);
            let Some(c) = self.bump() else { break };
            let tok = match c {
                ' ' | '\t' => continue,
                '\r' => {
                    if self.chars.peek() == Some(&'\n') {
                        continue; // the following \n emits the newline token
                    }
                    return Err(ParseError::new(line, col, "stray carriage return"));
                }
                '\n' => Tok::Newline,
                '#' => {
                    while let Some(&c) = self.chars.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                    continue;
                }
                '[' => Tok::LBracket,
                ']' => Tok::RBracket,
                '{' => Tok::LBrace,
                '}' => Tok::RBrace,
                '=' => Tok::Eq,
                ',' => Tok::Comma,
                '"' => self.lex_string(line, col)?,
                c if is_word_char(c) => {
                    let mut word = String::from(c);
                    while let Some(&c) = self.chars.peek() {
                        if !is_word_char(c) {
                            break;
                        }
                        word.push(c);
                        self.bump();
                    }
                    Tok::Word(word)
                }
                c => {
                    return Err(ParseError::new(line, col, format!("unexpected character {c:?}")));
                }
            };
            out.push(Spanned { tok, line, col });
        }
        out.push(Spanned { tok: Tok::Newline, line: self.line, col: self.col });
        Ok(out)
    }

    /// Called after the opening quote. Handles both `"..."` and `"""..."""`.
    fn lex_string(&mut self, line: usize, col: usize) -> PResult<Tok> {
        if self.chars.peek() == Some(&'"') {
            self.bump();
            if self.chars.peek() == Some(&'"') {
                self.bump();
                return self.lex_block_string(line, col);
            }
            return Ok(Tok::Str(String::new())); // "" is the empty string
        }
        let mut s = String::new();
        loop {
            let (eline, ecol) = (self.line, self.col);
            match self.bump() {
                None => return Err(ParseError::new(line, col, "unterminated string")),
                Some('\n') => {
                    return Err(ParseError::new(
                        eline,
                        ecol,
                        "newline in string; use a \\n escape or a triple-quoted block",
                    ));
                }
                Some('"') => return Ok(Tok::Str(s)),
                Some('\\') => match self.bump() {
                    Some('\\') => s.push('\\'),
                    Some('"') => s.push('"'),
                    Some('n') => s.push('\n'),
                    Some('t') => s.push('\t'),
                    Some('r') => s.push('\r'),
                    other => {
                        let what = match other {
                            Some(c) => format!("\\{c}"),
                            None => "end of input".to_string(),
                        };
                        return Err(ParseError::new(
                            eline,
                            ecol,
                            format!("unknown escape {what}; expected \\\\ \\\" \\n \\t \\r"),
                        ));
                    }
                },
                Some(c) => s.push(c),
            }
        }
    }

    /// Triple-quoted block: raw content up to the next `"""`. A newline
    /// immediately after the opening quotes is dropped so blocks can start
    /// on their own line.
    fn lex_block_string(&mut self, line: usize, col: usize) -> PResult<Tok> {
        let mut s = String::new();
        let mut quotes = 0u8;
        loop {
            match self.bump() {
                None => return Err(ParseError::new(line, col, "unterminated triple-quoted block")),
                Some('"') => {
                    quotes += 1;
                    if quotes == 3 {
                        return Ok(Tok::Str(trim_block(s)));
                    }
                }
                Some(c) => {
                    for _ in 0..quotes {
                        s.push('"');
                    }
                    quotes = 0;
                    s.push(c);
                }
            }
        }
    }
}

fn trim_block(s: String) -> String {
    match s.strip_prefix('\n') {
        Some(rest) => rest.to_string(),
        None => s,
    }
}

/// An untyped value with its position.
#[derive(Debug, Clone)]
struct SpannedValue {
    value: Value,
    line: usize,
    col: usize,
}

#[derive(Debug, Clone)]
enum Value {
    Str(String),
    Int(u64),
    List(Vec<SpannedValue>),
    Table(Vec<(String, usize, usize, SpannedValue)>),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Str(_) => "string",
            Value::Int(_) => "integer",
            Value::List(_) => "list",
            Value::Table(_) => "table",
        }
    }
}

struct RawEntry {
    key: String,
    line: usize,
    col: usize,
    value: SpannedValue,
}

struct RawSection {
    name: String,
    line: usize,
    col: usize,
    entries: Vec<RawEntry>,
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Spanned> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Spanned> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn end_pos(&self) -> (usize, usize) {
        match self.toks.last() {
            Some(t) => (t.line, t.col),
            None => (1, 1),
        }
    }

    fn expect(&mut self, want: Tok, what: &str) -> PResult<Spanned> {
        match self.next() {
            Some(t) if t.tok == want => Ok(t),
            Some(t) => Err(ParseError::new(t.line, t.col, format!("expected {what}"))),
            None => {
                let (l, c) = self.end_pos();
                Err(ParseError::new(l, c, format!("expected {what}, found end of input")))
            }
        }
    }

    fn skip_newlines(&mut self) {
        while matches!(self.peek(), Some(Spanned { tok: Tok::Newline, .. })) {
            self.pos += 1;
        }
    }

    fn sections(&mut self) -> PResult<Vec<RawSection>> {
        let mut sections: Vec<RawSection> = Vec::new();
        loop {
            self.skip_newlines();
            let Some(t) = self.next() else { break };
            match t.tok {
                Tok::LBracket => {
                    let name_tok = self.next().ok_or_else(|| {
                        ParseError::new(t.line, t.col, "expected section name after `[`")
                    })?;
                    let Tok::Word(name) = name_tok.tok else {
                        return Err(ParseError::new(
                            name_tok.line,
                            name_tok.col,
                            "expected section name after `[`",
                        ));
                    };
                    self.expect(Tok::RBracket, "`]` after section name")?;
                    self.expect(Tok::Newline, "end of line after section header")?;
                    sections.push(RawSection {
                        name,
                        line: t.line,
                        col: t.col,
                        entries: Vec::new(),
                    });
                }
                Tok::Word(key) => {
                    self.expect(Tok::Eq, &format!("`=` after key `{key}`"))?;
                    let value = self.value()?;
                    self.expect(Tok::Newline, "end of line after value")?;
                    let section = sections.last_mut().ok_or_else(|| {
                        ParseError::new(t.line, t.col, format!("key `{key}` outside any section"))
                    })?;
                    if let Some(prev) = section.entries.iter().find(|e| e.key == key) {
                        return Err(ParseError::new(
                            t.line,
                            t.col,
                            format!(
                                "duplicate key `{key}` in [{}] (first at line {})",
                                section.name, prev.line
                            ),
                        ));
                    }
                    section.entries.push(RawEntry { key, line: t.line, col: t.col, value });
                }
                _ => {
                    return Err(ParseError::new(
                        t.line,
                        t.col,
                        "expected a section header or `key = value`",
                    ));
                }
            }
        }
        Ok(sections)
    }

    fn value(&mut self) -> PResult<SpannedValue> {
        let Some(t) = self.next() else {
            let (l, c) = self.end_pos();
            return Err(ParseError::new(l, c, "expected a value, found end of input"));
        };
        let value = match t.tok {
            Tok::Str(s) => Value::Str(s),
            Tok::Word(w) if w.bytes().all(|b| b.is_ascii_digit()) => {
                let n = w.parse::<u64>().map_err(|_| {
                    ParseError::new(t.line, t.col, format!("integer `{w}` out of range"))
                })?;
                Value::Int(n)
            }
            Tok::Word(w) => {
                return Err(ParseError::new(
                    t.line,
                    t.col,
                    format!("bare word `{w}` is not a value; quote strings"),
                ));
            }
            Tok::LBracket => {
                let mut items = Vec::new();
                loop {
                    self.skip_newlines();
                    if matches!(self.peek(), Some(Spanned { tok: Tok::RBracket, .. })) {
                        self.pos += 1;
                        break;
                    }
                    items.push(self.value()?);
                    self.skip_newlines();
                    match self.next() {
                        Some(Spanned { tok: Tok::Comma, .. }) => continue,
                        Some(Spanned { tok: Tok::RBracket, .. }) => break,
                        Some(t) => {
                            return Err(ParseError::new(
                                t.line,
                                t.col,
                                "expected `,` or `]` in list",
                            ));
                        }
                        None => {
                            let (l, c) = self.end_pos();
                            return Err(ParseError::new(l, c, "unterminated list"));
                        }
                    }
                }
                Value::List(items)
            }
            Tok::LBrace => {
                let mut pairs: Vec<(String, usize, usize, SpannedValue)> = Vec::new();
                loop {
                    self.skip_newlines();
                    if matches!(self.peek(), Some(Spanned { tok: Tok::RBrace, .. })) {
                        self.pos += 1;
                        break;
                    }
                    let kt = self.next().ok_or_else(|| {
                        let (l, c) = self.end_pos();
                        ParseError::new(l, c, "unterminated table")
                    })?;
                    let Tok::Word(key) = kt.tok else {
                        return Err(ParseError::new(kt.line, kt.col, "expected key in table"));
                    };
                    if pairs.iter().any(|(k, ..)| *k == key) {
                        return Err(ParseError::new(
                            kt.line,
                            kt.col,
                            format!("duplicate key `{key}` in table"),
                        ));
                    }
                    self.expect(Tok::Eq, &format!("`=` after key `{key}`"))?;
                    self.skip_newlines();
                    let v = self.value()?;
                    pairs.push((key, kt.line, kt.col, v));
                    self.skip_newlines();
                    match self.next() {
                        Some(Spanned { tok: Tok::Comma, .. }) => continue,
                        Some(Spanned { tok: Tok::RBrace, .. }) => break,
                        Some(t) => {
                            return Err(ParseError::new(
                                t.line,
                                t.col,
                                "expected `,` or `}` in table",
                            ));
                        }
                        None => {
                            let (l, c) = self.end_pos();
                            return Err(ParseError::new(l, c, "unterminated table"));
                        }
                    }
                }
                Value::Table(pairs)
            }
            _ => return Err(ParseError::new(t.line, t.col, "expected a value")),
        };
        Ok(SpannedValue { value, line: t.line, col: t.col })
    }
}

/// Typed access to one section's keys; tracks which keys were consumed so
/// leftovers can be reported as unknown.
struct Fields {
    section: String,
    line: usize,
    col: usize,
    entries: Vec<RawEntry>,
    taken: Vec<bool>,
}

impl Fields {
    fn new(section: RawSection) -> Fields {
        let taken = vec![false; section.entries.len()];
        Fields {
            section: section.name,
            line: section.line,
            col: section.col,
            entries: section.entries,
            taken,
        }
    }

    fn take(&mut self, key: &str) -> Option<&RawEntry> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.key == key && !self.taken[i] {
                self.taken[i] = true;
                return Some(&self.entries[i]);
            }
        }
        None
    }

    fn take_str(&mut self, key: &str) -> PResult<Option<(String, usize, usize)>> {
        match self.take(key) {
            None => Ok(None),
            Some(e) => match &e.value.value {
                Value::Str(s) => Ok(Some((s.clone(), e.value.line, e.value.col))),
                v => Err(type_error(&e.value, key, "a string", v)),
            },
        }
    }

    fn need_str(&mut self, key: &str) -> PResult<(String, usize, usize)> {
        match self.take_str(key)? {
            Some(v) => Ok(v),
            None => Err(self.missing(key)),
        }
    }

    fn take_u64(&mut self, key: &str) -> PResult<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(e) => match &e.value.value {
                Value::Int(n) => Ok(Some(*n)),
                v => Err(type_error(&e.value, key, "an integer", v)),
            },
        }
    }

    fn take_str_list(&mut self, key: &str) -> PResult<Option<Vec<(String, usize, usize)>>> {
        match self.take(key) {
            None => Ok(None),
            Some(e) => match &e.value.value {
                Value::List(items) => {
                    let mut out = Vec::new();
                    for it in items {
                        match &it.value {
                            Value::Str(s) => out.push((s.clone(), it.line, it.col)),
                            v => {
                                return Err(ParseError::new(
                                    it.line,
                                    it.col,
                                    format!("`{key}` items must be strings, found {}", v.kind()),
                                ));
                            }
                        }
                    }
                    Ok(Some(out))
                }
                v => Err(type_error(&e.value, key, "a list", v)),
            },
        }
    }

    fn missing(&self, key: &str) -> ParseError {
        ParseError::new(
            self.line,
            self.col,
            format!("[{}] is missing required key `{key}`", self.section),
        )
    }

    fn finish(self) -> PResult<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if !self.taken[i] {
                return Err(ParseError::new(
                    e.line,
                    e.col,
                    format!("unknown key `{}` in [{}]", e.key, self.section),
                ));
            }
        }
        Ok(())
    }
}

fn type_error(sv: &SpannedValue, key: &str, want: &str, got: &Value) -> ParseError {
    ParseError::new(sv.line, sv.col, format!("`{key}` must be {want}, found {}", got.kind()))
}

fn table_fields(sv: &SpannedValue, what: &str) -> PResult<Fields> {
    match &sv.value {
        Value::Table(pairs) => Ok(Fields::new(RawSection {
            name: what.to_string(),
            line: sv.line,
            col: sv.col,
            entries: pairs
                .iter()
                .map(|(k, l, c, v)| RawEntry { key: k.clone(), line: *l, col: *c, value: v.clone() })
                .collect(),
        })),
        v => Err(ParseError::new(
            sv.line,
            sv.col,
            format!("expected a table for {what}, found {}", v.kind()),
        )),
    }
}

fn parse_image(s: &str, line: usize, col: usize) -> PResult<ImageSource> {
    if s.is_empty() {
        return Err(ParseError::new(line, col, "image must not be empty"));
    }
    if let Some(path) = s.strip_prefix("path:") {
        return Ok(ImageSource::LocalPath { path: path.to_string() });
    }
    if let Some(id) = s.strip_prefix("cloud:") {
        return Ok(ImageSource::CloudImage { id: id.to_string() });
    }
    if let Some((scheme, _)) = s.split_once(':') {
        return Err(ParseError::new(
            line,
            col,
            format!("unknown image scheme `{scheme}:`; expected `path:`, `cloud:`, or a registry coordinate"),
        ));
    }
    Ok(ImageSource::Registry { coordinate: s.to_string() })
}

fn parse_task_id(s: &str, line: usize, col: usize, what: &str) -> PResult<TaskId> {
    let (vm, idx) = s.rsplit_once(':').ok_or_else(|| {
        ParseError::new(line, col, format!("{what} must look like `vm:index`, found `{s}`"))
    })?;
    let index = idx.parse::<usize>().map_err(|_| {
        ParseError::new(line, col, format!("task index in `{s}` must be an unsigned integer"))
    })?;
    if vm.is_empty() {
        return Err(ParseError::new(line, col, format!("missing vm name in `{s}`")));
    }
    Ok(TaskId { vm: vm.to_string(), index })
}

fn parse_order_edge(s: &str, line: usize, col: usize) -> PResult<OrderEdge> {
    let (before, after) = s.split_once("->").ok_or_else(|| {
        ParseError::new(line, col, format!("order edge must look like `vm:i -> vm:j`, found `{s}`"))
    })?;
    Ok(OrderEdge {
        before: parse_task_id(before.trim(), line, col, "order edge endpoint")?,
        after: parse_task_id(after.trim(), line, col, "order edge endpoint")?,
    })
}

fn parse_task_ref(sv: &SpannedValue) -> PResult<TaskRef> {
    match &sv.value {
        Value::Str(s) => Ok(TaskRef::new(s)),
        Value::Table(_) => {
            let mut f = table_fields(sv, "task")?;
            let (script, ..) = f.need_str("script")?;
            let before_hook = f.take_str("before_hook")?.map(|(s, ..)| s);
            let after_hook = f.take_str("after_hook")?.map(|(s, ..)| s);
            let mut env = BTreeMap::new();
            if let Some(e) = f.take("env") {
                let ev = e.value.clone();
                let mut ef = table_fields(&ev, "env")?;
                let keys: Vec<String> = ef.entries.iter().map(|e| e.key.clone()).collect();
                for key in keys {
                    if !is_valid_name(&key) {
                        return Err(ParseError::new(
                            ev.line,
                            ev.col,
                            format!("env key `{key}` is not a valid identifier"),
                        ));
                    }
                    let (val, ..) = ef.need_str(&key)?;
                    env.insert(key, val);
                }
                ef.finish()?;
            }
            f.finish()?;
            Ok(TaskRef { script, before_hook, after_hook, env })
        }
        v => Err(ParseError::new(
            sv.line,
            sv.col,
            format!("a task must be a script name or a table, found {}", v.kind()),
        )),
    }
}

fn parse_staged_file(sv: &SpannedValue) -> PResult<StagedFile> {
    let mut f = table_fields(sv, "input")?;
    let (local, ..) = f.need_str("local")?;
    let (remote, ..) = f.need_str("remote")?;
    let (vm, ..) = f.need_str("vm")?;
    f.finish()?;
    Ok(StagedFile { local, vm, remote })
}

fn parse_expected_output(sv: &SpannedValue) -> PResult<ExpectedOutput> {
    let mut f = table_fields(sv, "output")?;
    let (name, ..) = f.need_str("name")?;
    let (remote, ..) = f.need_str("remote")?;
    let (vm, ..) = f.need_str("vm")?;
    f.finish()?;
    Ok(ExpectedOutput { vm, remote, name })
}

fn section_suffix(name: &str, line: usize, col: usize) -> PResult<(String, String)> {
    match name.split_once('.') {
        Some((kind, rest)) if !rest.is_empty() => Ok((kind.to_string(), rest.to_string())),
        _ => Err(ParseError::new(line, col, format!("section [{name}] is missing a name suffix"))),
    }
}

/// Parses a workflow document. On success every default is filled in; the
/// result still needs [`super::validate_workflow`] before it can run.
pub fn parse_workflow(text: &str) -> Result<Workflow, ParseError> {
    let toks = Lexer::new(text).tokenize()?;
    let mut parser = Parser { toks, pos: 0 };
    let raw_sections = parser.sections()?;

    let mut workflow_fields: Option<Fields> = None;
    let mut vms: BTreeMap<String, VmSpec> = BTreeMap::new();
    let mut scripts: BTreeMap<String, Script> = BTreeMap::new();
    let mut collectors: BTreeMap<String, CollectorSpec> = BTreeMap::new();
    let mut jobs_in_order: Vec<Job> = Vec::new();
    let mut publish_indexed: BTreeMap<u64, PublishTarget> = BTreeMap::new();

    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for section in raw_sections {
        if let Some(first) = seen.get(&section.name) {
            return Err(ParseError::new(
                section.line,
                section.col,
                format!("duplicate section [{}] (first at line {first})", section.name),
            ));
        }
        seen.insert(section.name.clone(), section.line);
        let (line, col) = (section.line, section.col);

        if section.name == "workflow" {
            workflow_fields = Some(Fields::new(section));
            continue;
        }
        let (kind, suffix) = section_suffix(&section.name, line, col)?;
        if kind != "publish" && !is_valid_name(&suffix) {
            return Err(ParseError::new(
                line,
                col,
                format!("`{suffix}` is not a valid {kind} name"),
            ));
        }
        let mut f = Fields::new(section);
        match kind.as_str() {
            "vm" => {
                let (image_str, il, ic) = f.need_str("image")?;
                let image = parse_image(&image_str, il, ic)?;
                let ip = f.take_str("ip")?.map(|(s, ..)| s);
                let cpus = f.take_u64("cpus")?.unwrap_or(1);
                let memory_mb = f.take_u64("memory_mb")?.unwrap_or(512);
                let config_scripts = f
                    .take_str_list("config_scripts")?
                    .map(|v| v.into_iter().map(|(s, ..)| s).collect())
                    .unwrap_or_default();
                f.finish()?;
                vms.insert(
                    suffix.clone(),
                    VmSpec { name: suffix, image, ip, cpus, memory_mb, config_scripts },
                );
            }
            "script" => {
                let inline = f.take_str("inline")?;
                let file = f.take_str("file")?;
                let source = match (inline, file) {
                    (Some((body, ..)), None) => ScriptSource::Inline(body),
                    (None, Some((path, ..))) => ScriptSource::File(path),
                    (Some(_), Some((_, l, c))) => {
                        return Err(ParseError::new(
                            l,
                            c,
                            format!("[script.{suffix}] sets both `inline` and `file`"),
                        ));
                    }
                    (None, None) => {
                        return Err(ParseError::new(
                            line,
                            col,
                            format!("[script.{suffix}] needs `inline` or `file`"),
                        ));
                    }
                };
                let interpreter = match f.take_str("interpreter")? {
                    None => Interpreter::Shell,
                    Some((s, l, c)) => Interpreter::from_name(&s).ok_or_else(|| {
                        ParseError::new(
                            l,
                            c,
                            format!("unknown interpreter `{s}`; expected `shell` or `collector-directive`"),
                        )
                    })?,
                };
                f.finish()?;
                scripts.insert(suffix.clone(), Script { name: suffix, source, interpreter });
            }
            "collector" => {
                let (install, ..) = f.need_str("install")?;
                let (start, ..) = f.need_str("start")?;
                let (stop, ..) = f.need_str("stop")?;
                let (export, ..) = f.need_str("export")?;
                let trace_outputs = match f.take_str_list("trace_outputs")? {
                    Some(v) => v.into_iter().map(|(s, ..)| s).collect(),
                    None => return Err(f.missing("trace_outputs")),
                };
                f.finish()?;
                collectors.insert(
                    suffix.clone(),
                    CollectorSpec { name: suffix, install, start, stop, export, trace_outputs },
                );
            }
            "job" => {
                let iterations = f.take_u64("iterations")?.unwrap_or(1);
                let tasks_entry = f
                    .take("tasks")
                    .ok_or_else(|| {
                        ParseError::new(
                            line,
                            col,
                            format!("[job.{suffix}] is missing required key `tasks`"),
                        )
                    })?
                    .value
                    .clone();
                let mut tasks: BTreeMap<String, Vec<TaskRef>> = BTreeMap::new();
                {
                    let tf = table_fields(&tasks_entry, "tasks")?;
                    for e in &tf.entries {
                        let list = match &e.value.value {
                            Value::List(items) => items,
                            v => {
                                return Err(ParseError::new(
                                    e.value.line,
                                    e.value.col,
                                    format!("tasks for `{}` must be a list, found {}", e.key, v.kind()),
                                ));
                            }
                        };
                        let mut refs = Vec::new();
                        for item in list {
                            refs.push(parse_task_ref(item)?);
                        }
                        tasks.insert(e.key.clone(), refs);
                    }
                }
                let mut inputs = Vec::new();
                if let Some(e) = f.take("inputs") {
                    let v = e.value.clone();
                    match &v.value {
                        Value::List(items) => {
                            for it in items {
                                inputs.push(parse_staged_file(it)?);
                            }
                        }
                        other => return Err(type_error(&v, "inputs", "a list", other)),
                    }
                }
                let mut outputs = Vec::new();
                if let Some(e) = f.take("outputs") {
                    let v = e.value.clone();
                    match &v.value {
                        Value::List(items) => {
                            for it in items {
                                outputs.push(parse_expected_output(it)?);
                            }
                        }
                        other => return Err(type_error(&v, "outputs", "a list", other)),
                    }
                }
                let mut order = Vec::new();
                if let Some(edges) = f.take_str_list("order")? {
                    for (s, l, c) in edges {
                        order.push(parse_order_edge(&s, l, c)?);
                    }
                }
                let on_failure = match f.take_str("on_failure")? {
                    None => FailurePolicy::Abort,
                    Some((s, l, c)) => FailurePolicy::from_name(&s).ok_or_else(|| {
                        ParseError::new(
                            l,
                            c,
                            format!("unknown failure policy `{s}`; expected `abort` or `continue`"),
                        )
                    })?,
                };
                let collector = f.take_str("collector")?.map(|(s, ..)| s);
                f.finish()?;
                jobs_in_order.push(Job {
                    name: suffix,
                    iterations,
                    tasks,
                    inputs,
                    outputs,
                    order,
                    on_failure,
                    collector,
                });
            }
            "publish" => {
                let index: u64 = suffix.parse().map_err(|_| {
                    ParseError::new(
                        line,
                        col,
                        format!("publish sections are numbered: expected [publish.0], [publish.1], ... found [publish.{suffix}]"),
                    )
                })?;
                let (kind_str, kl, kc) = f.need_str("kind")?;
                let kind = TargetKind::from_name(&kind_str).ok_or_else(|| {
                    ParseError::new(
                        kl,
                        kc,
                        format!("unknown publish kind `{kind_str}`; expected `github` or `dataverse`"),
                    )
                })?;
                let (locator, ..) = f.need_str("locator")?;
                let (auth_env, ..) = f.need_str("auth_env")?;
                let lfs_threshold_bytes =
                    f.take_u64("lfs_threshold_bytes")?.unwrap_or(DEFAULT_LFS_THRESHOLD);
                f.finish()?;
                publish_indexed
                    .insert(index, PublishTarget { kind, locator, auth_env, lfs_threshold_bytes });
            }
            other => {
                return Err(ParseError::new(
                    line,
                    col,
                    format!("unknown section kind `{other}`; expected workflow, vm, script, collector, job, or publish"),
                ));
            }
        }
    }

    let mut wf = workflow_fields
        .ok_or_else(|| ParseError::new(1, 1, "document has no [workflow] section"))?;
    let (name, ..) = wf.need_str("name")?;
    let seed = wf.take_u64("seed")?.unwrap_or(0);
    let mode = match wf.take_str("mode")? {
        None => Mode::Mock,
        Some((s, l, c)) => Mode::from_name(&s).ok_or_else(|| {
            ParseError::new(
                l,
                c,
                format!("unknown mode `{s}`; expected mock, local, managed-vm, or cloud"),
            )
        })?,
    };
    let jobs_key_span = wf.entries.iter().find(|e| e.key == "jobs").map(|e| (e.line, e.col));
    let jobs = match wf.take_str_list("jobs")? {
        None => jobs_in_order,
        Some(listed) => {
            let mut by_name: BTreeMap<String, Job> =
                jobs_in_order.into_iter().map(|j| (j.name.clone(), j)).collect();
            let mut ordered = Vec::new();
            for (jn, l, c) in &listed {
                match by_name.remove(jn) {
                    Some(j) => ordered.push(j),
                    None => {
                        return Err(ParseError::new(
                            *l,
                            *c,
                            format!("`jobs` lists `{jn}` but there is no [job.{jn}] section (or it is listed twice)"),
                        ));
                    }
                }
            }
            if let Some(leftover) = by_name.keys().next() {
                let (l, c) = jobs_key_span.unwrap_or((1, 1));
                return Err(ParseError::new(
                    l,
                    c,
                    format!("[job.{leftover}] is declared but missing from the `jobs` list"),
                ));
            }
            ordered
        }
    };
    wf.finish()?;

    let publish_targets: Vec<PublishTarget> = {
        let mut out = Vec::new();
        for (i, (idx, t)) in publish_indexed.into_iter().enumerate() {
            if idx != i as u64 {
                return Err(ParseError::new(
                    1,
                    1,
                    format!("publish sections must be numbered consecutively from 0; missing [publish.{i}]"),
                ));
            }
            out.push(t);
        }
        out
    };

    Ok(Workflow { name, seed, mode, vms, scripts, collectors, jobs, publish_targets })
}
