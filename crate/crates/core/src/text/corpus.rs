use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whose persona conditions the response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PersonaSide {
    /// The responder's own profile ("your persona" lines).
    #[default]
    #[serde(rename = "self")]
    Own,
    /// The dialogue partner's profile ("partner's persona" lines).
    Their,
    /// No persona at all.
    None,
}

impl FromStr for PersonaSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Self::Own),
            "their" => Ok(Self::Their),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "persona side must be self, their or none, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for PersonaSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Own => "self",
            Self::Their => "their",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PersonaVersion {
    #[default]
    Original,
    Revised,
}

impl FromStr for PersonaVersion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "revised" => Ok(Self::Revised),
            other => Err(Error::Config(format!(
                "persona version must be original or revised, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for PersonaVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Original => "original",
            Self::Revised => "revised",
        })
    }
}

/// One ranking instance: a context, a persona, and the candidates to rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub context: Vec<String>,
    #[serde(default)]
    pub persona: Vec<String>,
    pub candidates: Vec<String>,
    pub positive_index: usize,
    #[serde(default)]
    pub persona_side: PersonaSide,
    #[serde(default)]
    pub persona_version: PersonaVersion,
}

impl DialogueExample {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::Data("example has an empty context".into()));
        }
        if self.candidates.is_empty() {
            return Err(Error::Data("example has no candidates".into()));
        }
        if self.positive_index >= self.candidates.len() {
            return Err(Error::Data(format!(
                "positive index {} out of range for {} candidates",
                self.positive_index,
                self.candidates.len()
            )));
        }
        if self.persona_side != PersonaSide::None && self.persona.is_empty() {
            return Err(Error::Data(format!(
                "no {} persona profiles",
                self.persona_side
            )));
        }
        Ok(())
    }
}

const OWN_PREFIX: &str = "your persona:";
const PARTNER_PREFIX: &str = "partner's persona:";

#[derive(Default)]
struct Dialogue {
    own: Vec<String>,
    partner: Vec<String>,
    history: Vec<String>,
}

/// Parses the line-numbered text format: persona lines followed by turn lines
/// `partner\tresponse\t\tcand|cand|...`, with the counter restarting at 1 for
/// every dialogue. Produces one example per turn.
pub fn parse_personachat(
    path: &Path,
    side: PersonaSide,
    version: PersonaVersion,
) -> Result<Vec<DialogueExample>> {
    let text = fs::read_to_string(path)?;
    parse_personachat_str(&text, path, side, version)
}

pub fn parse_personachat_str(
    text: &str,
    path: &Path,
    side: PersonaSide,
    version: PersonaVersion,
) -> Result<Vec<DialogueExample>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut examples = Vec::new();
    let mut dialogue = Dialogue::default();
    let mut expected = 1usize;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (counter, payload) = line
            .split_once(' ')
            .ok_or_else(|| err(lineno, "expected \"<n> <payload>\"".into()))?;
        let counter: usize = counter
            .parse()
            .map_err(|_| err(lineno, format!("bad line counter {counter:?}")))?;
        if counter == 1 {
            dialogue = Dialogue::default();
        } else if counter != expected {
            return Err(err(
                lineno,
                format!("line counter {counter}, expected 1 or {expected}"),
            ));
        }
        expected = counter + 1;

        if let Some(rest) = payload.strip_prefix(OWN_PREFIX) {
            dialogue.own.push(rest.trim().to_string());
            continue;
        }
        if let Some(rest) = payload.strip_prefix(PARTNER_PREFIX) {
            dialogue.partner.push(rest.trim().to_string());
            continue;
        }

        let fields: Vec<&str> = payload.split('\t').collect();
        if fields.len() < 4 {
            return Err(err(
                lineno,
                format!(
                    "turn line needs partner, response, reward and candidates fields, got {}",
                    fields.len()
                ),
            ));
        }
        let partner = fields[0].trim().to_string();
        let response = fields[1].trim().to_string();
        let candidates: Vec<String> = fields[3].split('|').map(|c| c.trim().to_string()).collect();
        let positive_index = candidates
            .iter()
            .position(|c| *c == response)
            .ok_or_else(|| {
                Error::Data(format!(
                    "{}:{lineno}: true response is not among the candidates",
                    path.display()
                ))
            })?;

        let persona = match side {
            PersonaSide::Own => dialogue.own.clone(),
            PersonaSide::Their => dialogue.partner.clone(),
            PersonaSide::None => Vec::new(),
        };
        if side != PersonaSide::None && persona.is_empty() {
            return Err(Error::Data(format!(
                "{}:{lineno}: dialogue has no {side} persona lines",
                path.display()
            )));
        }

        dialogue.history.push(partner);
        examples.push(DialogueExample {
            context: dialogue.history.clone(),
            persona,
            candidates,
            positive_index,
            persona_side: side,
            persona_version: version,
        });
        dialogue.history.push(response);
    }
    Ok(examples)
}

/// Reads the JSON-lines mirror: one example object per line.
pub fn parse_jsonl(
    path: &Path,
    side: PersonaSide,
    version: PersonaVersion,
) -> Result<Vec<DialogueExample>> {
    let text = fs::read_to_string(path)?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut ex: DialogueExample =
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        ex.persona_side = side;
        ex.persona_version = version;
        if side == PersonaSide::None {
            ex.persona.clear();
        }
        ex.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        examples.push(ex);
    }
    Ok(examples)
}

pub fn write_jsonl(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads either format, choosing the JSON-lines reader for `.jsonl` files.
pub fn load_corpus(
    path: &Path,
    side: PersonaSide,
    version: PersonaVersion,
) -> Result<Vec<DialogueExample>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        parse_jsonl(path, side, version)
    } else {
        parse_personachat(path, side, version)
    }
}
