//! Binary dataset files.
//!
//! ```text
//! "STSN" | version u16 | count u32 | height u16 | width u16 | channels u8
//! per problem: answer u8 | type u8 | json_len u32 | json | 16 × H·W·C bytes
//! ```
//! Integers are little-endian; pixels are `round(v·255)`, panels ordered
//! context 0..7 then candidates 0..7.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Attribute, MatrixProblem, ProblemType, Rule, SymbolicPanel};
use crate::error::{Error, Result};
use crate::image::PanelImage;

pub const MAGIC: &[u8; 4] = b"STSN";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    rules: Vec<Rule>,
    bisection: Vec<Attribute>,
    context: Vec<SymbolicPanel>,
    candidates: Vec<SymbolicPanel>,
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes problems into the dataset byte format.
pub fn encode_dataset(problems: &[MatrixProblem]) -> Result<Vec<u8>> {
    let (h, w, c) = problems
        .first()
        .and_then(|p| p.images.first())
        .map_or((0, 0, 0), |im| (im.height, im.width, im.channels));
    if h > u16::MAX as usize || w > u16::MAX as usize || c > u8::MAX as usize {
        return Err(Error::Format(format!("image {h}x{w}x{c} exceeds header range")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(problems.len()).map_err(|_| Error::Format("too many problems".into()))?.to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.push(c as u8);
    for p in problems {
        if p.images.len() != 16 || p.images.iter().any(|im| (im.height, im.width, im.channels) != (h, w, c)) {
            return Err(Error::Format("every problem needs 16 images of one size".into()));
        }
        out.push(p.answer as u8);
        out.push(p.problem_type.code());
        let meta = Meta {
            rules: p.rules.clone(),
            bisection: p.bisection.clone(),
            context: p.context.clone(),
            candidates: p.candidates.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for im in &p.images {
            out.extend(im.data.iter().map(|&v| quantize(v)));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

/// Decodes the dataset byte format.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<MatrixProblem>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let (h, w, c) = (cur.u16()? as usize, cur.u16()? as usize, cur.u8()? as usize);
    if count > 0 && h * w * c == 0 {
        return Err(Error::Format("empty image dimensions".into()));
    }
    let mut problems = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let answer = cur.u8()? as usize;
        let problem_type = ProblemType::from_code(cur.u8()?)?;
        let len = cur.u32()? as usize;
        let meta: Meta = serde_json::from_slice(cur.take(len)?)
            .map_err(|e| Error::Format(format!("bad problem metadata: {e}")))?;
        if answer >= 8 || meta.context.len() != 8 || meta.candidates.len() != 8 {
            return Err(Error::Format("malformed problem record".into()));
        }
        let images = (0..16)
            .map(|_| {
                let data = cur.take(h * w * c)?.iter().map(|&b| b as f32 / 255.0).collect();
                PanelImage::new(h, w, c, data)
            })
            .collect::<Result<Vec<_>>>()?;
        problems.push(MatrixProblem {
            problem_type,
            rules: meta.rules,
            bisection: meta.bisection,
            context: meta.context,
            candidates: meta.candidates,
            answer,
            images,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(problems)
}

pub fn write_dataset(problems: &[MatrixProblem], path: &Path) -> Result<()> {
    let bytes = encode_dataset(problems)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<MatrixProblem>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}
