//! A small formula language for per-stage model terms.
//!
//! ```text
//! spec   := term ('+' term)*
//! term   := factor ('*' factor)*
//! factor := '1' | NAME '[' INT ']' | 'log(' NAME '[' INT ']' ')'
//!         | 'A[' INT ']' | 'Astar[' INT ']' | 'EA[' INT ']'
//! ```
//!
//! Term order is parameter order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RESERVED: [&str; 3] = ["A", "Astar", "EA"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    Log,
}

/// How a treatment reference is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TreatmentSource {
    /// `A[l]`: the treatment as seen by the active substitution mode
    /// (actual, proxy, or expected).
    Actual,
    /// `Astar[l]`: always the recorded proxy.
    Proxy,
    /// `EA[l]`: always the adherence-model probability.
    Expected,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Factor {
    Constant,
    Covariate {
        name: String,
        stage: usize,
        transform: Transform,
    },
    Treatment {
        stage: usize,
        source: TreatmentSource,
    },
}

impl Factor {
    pub fn stage(&self) -> Option<usize> {
        match self {
            Factor::Constant => None,
            Factor::Covariate { stage, .. } | Factor::Treatment { stage, .. } => Some(*stage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Term {
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn treatment_refs(&self) -> impl Iterator<Item = (usize, TreatmentSource)> + '_ {
        self.factors.iter().filter_map(|f| match f {
            Factor::Treatment { stage, source } => Some((*stage, *source)),
            _ => None,
        })
    }
}

/// What a feature specification is used for; governs which treatment
/// references are legal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecRole {
    Contrast,
    TreatmentFree,
    Assignment,
    Adherence,
}

impl fmt::Display for SpecRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpecRole::Contrast => "contrast",
            SpecRole::TreatmentFree => "treatment-free",
            SpecRole::Assignment => "assignment",
            SpecRole::Adherence => "adherence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureSpec {
    terms: Vec<Term>,
}

impl FeatureSpec {
    pub fn parse(text: &str) -> Result<Self> {
        Parser::new(text).spec()
    }

    /// Parses and checks the stage references against `stage`.
    pub fn parse_for_stage(text: &str, stage: usize, role: SpecRole) -> Result<Self> {
        let spec = Self::parse(text)?;
        spec.validate(stage, role)?;
        Ok(spec)
    }

    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() || terms.iter().any(|t| t.factors.is_empty()) {
            return Err(Error::InvalidSpec("empty term list".into()));
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn max_stage(&self) -> usize {
        self.factors().filter_map(Factor::stage).max().unwrap_or(0)
    }

    fn factors(&self) -> impl Iterator<Item = &Factor> {
        self.terms.iter().flat_map(|t| t.factors.iter())
    }

    /// Stages whose treatment is referenced through `A[l]` or `EA[l]`.
    pub fn substituted_treatment_stages(&self) -> Vec<usize> {
        let mut stages: Vec<usize> = self
            .terms
            .iter()
            .flat_map(Term::treatment_refs)
            .filter(|(_, src)| *src != TreatmentSource::Proxy)
            .map(|(s, _)| s)
            .collect();
        stages.sort_unstable();
        stages.dedup();
        stages
    }

    pub fn term_labels(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }

    /// Checks stage references for a model fitted at `stage`.
    pub fn validate(&self, stage: usize, role: SpecRole) -> Result<()> {
        if let Some(bad) = self.factors().filter_map(Factor::stage).find(|&s| s > stage) {
            return Err(Error::StageOutOfRange(format!(
                "{role} model at stage {stage} references stage {bad}"
            )));
        }
        for (s, src) in self.terms.iter().flat_map(Term::treatment_refs) {
            let current = s == stage;
            let illegal = match role {
                SpecRole::Contrast | SpecRole::TreatmentFree => current,
                SpecRole::Assignment => current || src == TreatmentSource::Expected,
                SpecRole::Adherence => {
                    src == TreatmentSource::Expected
                        || (current && src == TreatmentSource::Actual)
                }
            };
            if illegal {
                return Err(Error::InvalidSpec(format!(
                    "{role} model at stage {stage} may not reference {}",
                    Factor::Treatment { stage: s, source: src }
                )));
            }
        }
        if role == SpecRole::Adherence {
            let has_proxy = self.terms.iter().flat_map(Term::treatment_refs).any(|(s, src)| {
                s == stage && src == TreatmentSource::Proxy
            });
            if !has_proxy {
                return Err(Error::InvalidSpec(format!(
                    "adherence model at stage {stage} must include Astar[{stage}]"
                )));
            }
        }
        Ok(())
    }
}

impl FromStr for FeatureSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl TryFrom<String> for FeatureSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<FeatureSpec> for String {
    fn from(s: FeatureSpec) -> String {
        s.to_string()
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Constant => f.write_str("1"),
            Factor::Covariate {
                name,
                stage,
                transform: Transform::Identity,
            } => write!(f, "{name}[{stage}]"),
            Factor::Covariate {
                name,
                stage,
                transform: Transform::Log,
            } => write!(f, "log({name}[{stage}])"),
            Factor::Treatment { stage, source } => {
                let tag = match source {
                    TreatmentSource::Actual => "A",
                    TreatmentSource::Proxy => "Astar",
                    TreatmentSource::Expected => "EA",
                };
                write!(f, "{tag}[{stage}]")
            }
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, factor) in self.factors.iter().enumerate() {
            if i > 0 {
                f.write_str("*")?;
            }
            write!(f, "{factor}")?;
        }
        Ok(())
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, term) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{term}")?;
        }
        Ok(())
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            position: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            match self.peek() {
                Some(found) => self.err(format!("expected `{c}`, found `{found}`")),
                None => self.err(format!("expected `{c}`, found end of input")),
            }
        }
    }

    fn spec(mut self) -> Result<FeatureSpec> {
        let mut terms = vec![self.term()?];
        while self.eat('+') {
            terms.push(self.term()?);
        }
        self.skip_ws();
        if let Some(c) = self.peek() {
            return self.err(format!("unexpected `{c}`"));
        }
        Ok(FeatureSpec { terms })
    }

    fn term(&mut self) -> Result<Term> {
        let mut factors = vec![self.factor()?];
        while self.eat('*') {
            factors.push(self.factor()?);
        }
        Ok(Term { factors })
    }

    fn ident(&mut self) -> Option<&'a str> {
        let start = self.pos;
        let rest = &self.src[start..];
        let mut len = 0;
        for (i, c) in rest.char_indices() {
            let ok = if i == 0 {
                c.is_ascii_alphabetic() || c == '_'
            } else {
                c.is_ascii_alphanumeric() || c == '_'
            };
            if !ok {
                break;
            }
            len = i + c.len_utf8();
        }
        if len == 0 {
            None
        } else {
            self.pos += len;
            Some(&rest[..len])
        }
    }

    fn stage_index(&mut self) -> Result<usize> {
        self.expect('[')?;
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected stage number");
        }
        let stage: usize = self.src[start..self.pos].parse().map_err(|_| Error::Syntax {
            position: start,
            message: "stage number too large".into(),
        })?;
        if stage == 0 {
            self.pos = start;
            return self.err("stages are numbered from 1");
        }
        self.expect(']')?;
        Ok(stage)
    }

    fn factor(&mut self) -> Result<Factor> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some('1') => {
                self.pos += 1;
                if matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == '.') {
                    self.pos = start;
                    return self.err("the only numeric factor allowed is `1`");
                }
                Ok(Factor::Constant)
            }
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                let name = self.ident().expect("identifier start checked");
                self.skip_ws();
                if name == "log" && self.peek() == Some('(') {
                    self.pos += 1;
                    self.skip_ws();
                    let inner_start = self.pos;
                    let inner = match self.ident() {
                        Some(n) => n,
                        None => return self.err("expected covariate name inside log()"),
                    };
                    if RESERVED.contains(&inner) {
                        self.pos = inner_start;
                        return self.err(format!("log() of treatment `{inner}` is not allowed"));
                    }
                    let stage = self.stage_index()?;
                    self.expect(')')?;
                    return Ok(Factor::Covariate {
                        name: inner.to_string(),
                        stage,
                        transform: Transform::Log,
                    });
                }
                let stage = self.stage_index()?;
                let source = match name {
                    "A" => Some(TreatmentSource::Actual),
                    "Astar" => Some(TreatmentSource::Proxy),
                    "EA" => Some(TreatmentSource::Expected),
                    _ => None,
                };
                Ok(match source {
                    Some(source) => Factor::Treatment { stage, source },
                    None => Factor::Covariate {
                        name: name.to_string(),
                        stage,
                        transform: Transform::Identity,
                    },
                })
            }
            Some(c) => self.err(format!("unexpected `{c}`")),
            None => self.err("unexpected end of input"),
        }
    }
}
