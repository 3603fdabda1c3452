//! Maps a path inside a JSON document (`train.eta`, `fractions[2]`) back to
//! the line and column where its value starts.

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Seg {
    Key(String),
    Index(usize),
}

/// Parses `a.b[3].c` into segments.
pub fn parse_path(path: &str) -> Vec<Seg> {
    let mut out = Vec::new();
    for part in path.split('.').filter(|p| !p.is_empty()) {
        let (key, mut rest) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        if !key.is_empty() {
            out.push(Seg::Key(key.to_string()));
        }
        while let Some(end) = rest.find(']') {
            if let Ok(i) = rest[1..end].parse() {
                out.push(Seg::Index(i));
            }
            rest = &rest[end + 1..];
        }
    }
    out
}

enum Frame {
    Object { key: Option<String> },
    Array { index: usize },
}

struct Scanner<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
}

impl Scanner<'_> {
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

    fn string(&mut self) -> String {
        let mut s = String::new();
        while let Some(c) = self.bump() {
            match c {
                '"' => break,
                '\\' => {
                    if let Some(e) = self.bump() {
                        s.push(e);
                    }
                }
                _ => s.push(c),
            }
        }
        s
    }
}

/// 1-based `(line, column)` of the value at `path`, or of the deepest prefix
/// of it that exists. `None` when the text does not get that far.
pub fn locate(text: &str, path: &[Seg]) -> Option<(usize, usize)> {
    let mut sc = Scanner {
        chars: text.chars().peekable(),
        line: 1,
        col: 1,
    };
    let mut stack: Vec<Frame> = Vec::new();
    let mut best: Option<(usize, (usize, usize))> = None;
    let mut expecting_key = false;

    loop {
        while sc.chars.peek().is_some_and(|c| c.is_whitespace()) {
            sc.bump();
        }
        let pos = (sc.line, sc.col);
        let Some(&c) = sc.chars.peek() else { break };
        if expecting_key && c == '"' {
            sc.bump();
            let k = sc.string();
            if let Some(Frame::Object { key }) = stack.last_mut() {
                *key = Some(k);
            }
            expecting_key = false;
            continue;
        }
        match c {
            ':' => {
                sc.bump();
                continue;
            }
            ',' => {
                sc.bump();
                match stack.last_mut() {
                    Some(Frame::Array { index }) => *index += 1,
                    Some(Frame::Object { .. }) => expecting_key = true,
                    None => {}
                }
                continue;
            }
            '}' | ']' => {
                sc.bump();
                stack.pop();
                expecting_key = false;
                continue;
            }
            _ => {}
        }

        // A value starts here; compare the current path with the target.
        let depth = matching_depth(&stack, path);
        if depth == stack.len() && best.is_none_or(|(d, _)| depth >= d) {
            best = Some((depth, pos));
            if depth == path.len() {
                return Some(pos);
            }
        }
        match c {
            '{' => {
                sc.bump();
                stack.push(Frame::Object { key: None });
                expecting_key = true;
            }
            '[' => {
                sc.bump();
                stack.push(Frame::Array { index: 0 });
            }
            '"' => {
                sc.bump();
                sc.string();
            }
            _ => {
                while sc
                    .chars
                    .peek()
                    .is_some_and(|c| !c.is_whitespace() && !matches!(c, ',' | '}' | ']'))
                {
                    sc.bump();
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Number of leading frames of `stack` that agree with `path`.
fn matching_depth(stack: &[Frame], path: &[Seg]) -> usize {
    let mut n = 0;
    for (frame, seg) in stack.iter().zip(path) {
        let ok = match (frame, seg) {
            (Frame::Object { key: Some(k) }, Seg::Key(s)) => k == s,
            (Frame::Array { index }, Seg::Index(i)) => index == i,
            _ => false,
        };
        if !ok {
            break;
        }
        n += 1;
    }
    n
}
