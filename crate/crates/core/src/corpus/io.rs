//! Corpus and item-database files.
//!
//! Corpus JSONL, one dialogue per line:
//!
//! ```text
//! {"schema_version":1,"id":"d0","domains":["hotel"],
//!  "goal":{"domains":["hotel"],"entries":[{"slot":"hotel_price","value":"cheap","informed":false,"domain":"hotel"}]},
//!  "turns":[{"speaker":"user","utterance":"i want a cheap hotel",
//!            "action":[["inform","hotel_price","cheap"]],"satisfaction":2}, ...]}
//! ```
//!
//! Item database JSON:
//!
//! ```text
//! {"schema_version":1,"tables":{"hotel":{"name_slot":"hotel_name","requestable":["hotel_postcode"],
//!   "items":[{"id":2,"attributes":{"hotel_name":"...","hotel_parking":"yes","hotel_price":"cheap"}}]}},
//!  "extra_slots":[]}
//! ```
//!
//! The database sits next to the corpus: `corpus.jsonl` pairs with
//! `corpus.db.json`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::{Corpus, Dialogue, ItemDatabase, Turn, SCHEMA_VERSION};
use crate::error::{Error, Result};

pub fn adjacent_db_path(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("db.json")
}

pub fn load_item_db(path: impl AsRef<Path>) -> Result<ItemDatabase> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let db: ItemDatabase = serde_json::from_str(&raw).map_err(|e| Error::ItemDb(e.to_string()))?;
    db.validate()?;
    Ok(db)
}

pub fn write_item_db(path: impl AsRef<Path>, db: &ItemDatabase) -> Result<()> {
    let path = path.as_ref();
    let mut body = serde_json::to_string_pretty(db)?;
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Loads `path` together with its adjacent item database.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    load_corpus_with_db(path, adjacent_db_path(path))
}

pub fn load_corpus_with_db(path: impl AsRef<Path>, db_path: impl AsRef<Path>) -> Result<Corpus> {
    let db = load_item_db(db_path)?;
    let dialogues = read_dialogues(path.as_ref())?;
    let corpus = Corpus::new(dialogues, db)?;
    log::info!(
        "loaded {} dialogues / {} turns from {}",
        corpus.dialogues.len(),
        corpus.turn_count(),
        path.as_ref().display()
    );
    Ok(corpus)
}

pub fn read_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_dialogue_line(&line, idx + 1)?);
    }
    Ok(out)
}

pub fn parse_dialogue_line(line: &str, line_no: usize) -> Result<Dialogue> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let id = value
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Malformed {
            line: line_no,
            message: "missing string field `id`".into(),
        })?
        .to_string();
    match value.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        other => {
            return Err(Error::record(
                &id,
                None,
                format!("unsupported schema_version {other:?}"),
            ));
        }
    }
    let turns = value
        .get("turns")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::record(&id, None, "missing `turns` array"))?
        .iter()
        .enumerate()
        .map(|(i, t)| {
            serde_json::from_value::<Turn>(t.clone())
                .map_err(|e| Error::record(&id, Some(i), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let domains = serde_json::from_value(value.get("domains").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::record(&id, None, format!("domains: {e}")))?;
    let goal = match value.get("goal") {
        None | Some(Value::Null) => None,
        Some(g) => Some(
            serde_json::from_value(g.clone())
                .map_err(|e| Error::record(&id, None, format!("goal: {e}")))?,
        ),
    };
    let dialogue = Dialogue {
        id,
        domains,
        goal,
        turns,
    };
    dialogue.validate()?;
    Ok(dialogue)
}

#[derive(Serialize)]
struct DialogueLine<'a> {
    schema_version: u32,
    #[serde(flatten)]
    dialogue: &'a Dialogue,
}

pub fn dialogue_to_line(d: &Dialogue) -> Result<String> {
    Ok(serde_json::to_string(&DialogueLine {
        schema_version: SCHEMA_VERSION,
        dialogue: d,
    })?)
}

pub fn write_corpus(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for d in dialogues {
        writeln!(file, "{}", dialogue_to_line(d)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
