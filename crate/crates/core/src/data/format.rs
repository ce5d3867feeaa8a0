//! Line-delimited dataset files.
//!
//! ```text
//! q2a-vqa<TAB>v1<TAB>grid=4<TAB>answers=yes,no,...<TAB>tokens=<pad>,is,...
//! <cells><TAB><question text><TAB><token ids><TAB><answer><TAB><qtype>
//! ...
//! ```
//!
//! Cells are `G*G` comma-separated two-character codes in row-major order:
//! shape (`c`ircle, `s`quare, `t`riangle) then colour (`r`ed, `g`reen,
//! `b`lue, `y`ellow), or `..` for an empty cell. Token ids are
//! space-separated. Line numbers in errors count the header as line 1.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{AnswerVocabulary, Dataset, ImageGrid, QuestionType, TokenVocabulary, VqaSample};
use crate::error::{Error, Result};

const MAGIC: &str = "q2a-vqa";
pub const FORMAT_VERSION: &str = "v1";

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_dataset(data, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_dataset(data: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "{MAGIC}\t{FORMAT_VERSION}\tgrid={}\tanswers={}\ttokens={}",
        data.grid_size,
        data.answers.answers().join(","),
        data.tokens.tokens().join(",")
    )?;
    for s in &data.samples {
        let ids: Vec<String> = s.question_tokens.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            s.image.encode_cells(),
            s.question_text,
            ids.join(" "),
            data.answers.answer(s.answer_class).unwrap_or("?"),
            s.qtype
        )?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub(crate) fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .filter(|h| !h.trim().is_empty())
        .ok_or(Error::MissingHeader)?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.first() != Some(&MAGIC) {
        return Err(Error::MissingHeader);
    }
    let version = fields.get(1).copied().unwrap_or("");
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let header_err = |reason: &str| Error::MalformedRecord {
        line: 1,
        reason: reason.to_string(),
    };
    if fields.len() != 5 {
        return Err(header_err("header needs 5 tab-separated fields"));
    }
    let grid_size: usize = fields[2]
        .strip_prefix("grid=")
        .and_then(|g| g.parse().ok())
        .ok_or_else(|| header_err("bad grid field"))?;
    let list = |field: &str, key: &str| -> Result<Vec<String>> {
        field
            .strip_prefix(key)
            .map(|v| v.split(',').map(str::to_string).collect())
            .ok_or_else(|| header_err(&format!("expected {key}...")))
    };
    let answers = AnswerVocabulary::from_answers(list(fields[3], "answers=")?)?;
    let tokens = TokenVocabulary::from_tokens(list(fields[4], "tokens=")?)?;

    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        let sample = parse_record(line, grid_size, &answers, &tokens).map_err(|reason| {
            Error::MalformedRecord {
                line: line_no,
                reason,
            }
        })?;
        samples.push(sample);
    }
    Ok(Dataset {
        grid_size,
        answers,
        tokens,
        samples,
    })
}

fn parse_record(
    line: &str,
    grid_size: usize,
    answers: &AnswerVocabulary,
    tokens: &TokenVocabulary,
) -> std::result::Result<VqaSample, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let [cells, text, ids, answer, qtype] = fields[..] else {
        return Err(format!(
            "expected 5 tab-separated fields, found {}",
            fields.len()
        ));
    };
    let image = ImageGrid::decode_cells(grid_size, cells)?;
    let question_tokens = ids
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| format!("bad token id {t:?}"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let expected = tokens.tokenize(text).map_err(|e| e.to_string())?;
    if expected != question_tokens {
        return Err("token ids do not match question text".into());
    }
    let answer_class = answers
        .class_of(answer)
        .ok_or_else(|| format!("answer {answer:?} not in vocabulary"))?;
    let qtype = match qtype {
        "closed" => QuestionType::Closed,
        "open" => QuestionType::Open,
        other => return Err(format!("unknown question type {other:?}")),
    };
    Ok(VqaSample {
        image,
        question_text: text.to_string(),
        question_tokens,
        answer_class,
        qtype,
    })
}
