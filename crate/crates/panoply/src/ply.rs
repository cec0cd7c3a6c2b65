//! Minimal PLY reader/writer: ASCII and binary little-endian, scalar vertex
//! properties. List properties are parsed (and skipped) only so that elements
//! preceding `vertex` do not derail the cursor.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(tok: &str) -> Option<ScalarType> {
        Some(match tok {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, ScalarType::F32 | ScalarType::F64)
    }

    fn name(self) -> &'static str {
        match self {
            ScalarType::I8 => "char",
            ScalarType::U8 => "uchar",
            ScalarType::I16 => "short",
            ScalarType::U16 => "ushort",
            ScalarType::I32 => "int",
            ScalarType::U32 => "uint",
            ScalarType::F32 => "float",
            ScalarType::F64 => "double",
        }
    }
}

#[derive(Debug, Clone)]
pub enum ColumnData {
    Float(Vec<f64>),
    Int(Vec<i64>),
}

#[derive(Debug, Clone)]
pub struct PlyColumn {
    pub name: String,
    pub ty: ScalarType,
    pub data: ColumnData,
}

impl PlyColumn {
    pub fn as_f64(&self) -> Vec<f64> {
        match &self.data {
            ColumnData::Float(v) => v.clone(),
            ColumnData::Int(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn as_i64(&self) -> Vec<i64> {
        match &self.data {
            ColumnData::Float(v) => v.iter().map(|&x| x as i64).collect(),
            ColumnData::Int(v) => v.clone(),
        }
    }
}

/// Parsed vertex element of a PLY file.
#[derive(Debug, Clone)]
pub struct PlyData {
    pub format: PlyFormat,
    pub count: usize,
    pub columns: Vec<PlyColumn>,
}

impl PlyData {
    pub fn column(&self, name: &str) -> Option<&PlyColumn> {
        self.columns.iter().find(|c| c.name == name)
    }
}

#[derive(Debug)]
enum PropKind {
    Scalar(ScalarType),
    List(ScalarType, ScalarType),
}

#[derive(Debug)]
struct ElementDef {
    name: String,
    count: usize,
    props: Vec<(String, PropKind)>,
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let perr = |offset: u64, msg: String| Error::parse(path, offset, msg);

    // Header: ASCII lines up to and including "end_header".
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(String, u64)> {
        let start = *pos;
        if start >= bytes.len() {
            return Err(perr(bytes.len() as u64, "unexpected end of header".into()));
        }
        let mut end = start;
        while end < bytes.len() && bytes[end] != b'\n' {
            end += 1;
        }
        if end == bytes.len() {
            return Err(perr(bytes.len() as u64, "unterminated header line".into()));
        }
        let mut line_end = end;
        if line_end > start && bytes[line_end - 1] == b'\r' {
            line_end -= 1;
        }
        let line = std::str::from_utf8(&bytes[start..line_end])
            .map_err(|_| perr(start as u64, "non-utf8 header line".into()))?
            .to_string();
        *pos = end + 1;
        Ok((line, start as u64))
    };

    let (magic, off) = next_line(&mut pos)?;
    if magic.trim() != "ply" {
        return Err(perr(off, "missing `ply` magic".into()));
    }

    let mut format: Option<PlyFormat> = None;
    let mut elements: Vec<ElementDef> = Vec::new();
    loop {
        let (line, off) = next_line(&mut pos)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        match toks[0] {
            "comment" | "obj_info" => {}
            "format" => {
                if toks.len() < 2 {
                    return Err(perr(off, "malformed format line".into()));
                }
                format = Some(match toks[1] {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(perr(off, format!("unsupported format `{other}`")));
                    }
                });
            }
            "element" => {
                if toks.len() != 3 {
                    return Err(perr(off, "malformed element line".into()));
                }
                let count: usize = toks[2]
                    .parse()
                    .map_err(|_| perr(off, "bad element count".into()))?;
                elements.push(ElementDef {
                    name: toks[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| perr(off, "property before any element".into()))?;
                if toks.len() == 3 {
                    let ty = ScalarType::parse(toks[1])
                        .ok_or_else(|| perr(off, format!("unknown type `{}`", toks[1])))?;
                    elem.props.push((toks[2].to_string(), PropKind::Scalar(ty)));
                } else if toks.len() == 5 && toks[1] == "list" {
                    let ct = ScalarType::parse(toks[2])
                        .ok_or_else(|| perr(off, format!("unknown type `{}`", toks[2])))?;
                    let vt = ScalarType::parse(toks[3])
                        .ok_or_else(|| perr(off, format!("unknown type `{}`", toks[3])))?;
                    elem.props.push((toks[4].to_string(), PropKind::List(ct, vt)));
                } else {
                    return Err(perr(off, "malformed property line".into()));
                }
            }
            "end_header" => break,
            other => {
                return Err(perr(off, format!("unexpected header keyword `{other}`")));
            }
        }
    }
    let format = format.ok_or_else(|| perr(0, "header missing format line".into()))?;

    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| perr(0, "no vertex element".into()))?;

    let mut out: Option<PlyData> = None;
    match format {
        PlyFormat::BinaryLittleEndian => {
            let mut cursor = pos;
            for (ei, elem) in elements.iter().enumerate() {
                if ei == vertex_pos {
                    let mut cols: Vec<PlyColumn> = elem
                        .props
                        .iter()
                        .map(|(name, kind)| {
                            let ty = match kind {
                                PropKind::Scalar(t) => *t,
                                PropKind::List(_, t) => *t,
                            };
                            PlyColumn {
                                name: name.clone(),
                                ty,
                                data: if ty.is_float() {
                                    ColumnData::Float(Vec::with_capacity(elem.count))
                                } else {
                                    ColumnData::Int(Vec::with_capacity(elem.count))
                                },
                            }
                        })
                        .collect();
                    for _row in 0..elem.count {
                        for (pi, (name, kind)) in elem.props.iter().enumerate() {
                            match kind {
                                PropKind::Scalar(ty) => {
                                    let off = cursor as u64;
                                    let v = read_scalar(&bytes, &mut cursor, *ty)
                                        .map_err(|m| perr(off, m))?;
                                    push_value(&mut cols[pi], v, *ty, name, off, &perr)?;
                                }
                                PropKind::List(ct, vt) => {
                                    let off = cursor as u64;
                                    let n = read_scalar(&bytes, &mut cursor, *ct)
                                        .map_err(|m| perr(off, m))?;
                                    let n = match n {
                                        Value::Int(i) if i >= 0 => i as usize,
                                        _ => {
                                            return Err(perr(off, "bad list count".into()));
                                        }
                                    };
                                    // Vertex list properties are not meaningful
                                    // as columns; consume and drop.
                                    for _ in 0..n {
                                        let off = cursor as u64;
                                        read_scalar(&bytes, &mut cursor, *vt)
                                            .map_err(|m| perr(off, m))?;
                                    }
                                }
                            }
                        }
                    }
                    out = Some(PlyData {
                        format,
                        count: elem.count,
                        columns: cols,
                    });
                    break;
                } else {
                    // Skip a preceding element.
                    for _row in 0..elem.count {
                        for (_, kind) in &elem.props {
                            match kind {
                                PropKind::Scalar(ty) => {
                                    let off = cursor as u64;
                                    read_scalar(&bytes, &mut cursor, *ty)
                                        .map_err(|m| perr(off, m))?;
                                }
                                PropKind::List(ct, vt) => {
                                    let off = cursor as u64;
                                    let n = read_scalar(&bytes, &mut cursor, *ct)
                                        .map_err(|m| perr(off, m))?;
                                    let n = match n {
                                        Value::Int(i) if i >= 0 => i as usize,
                                        _ => {
                                            return Err(perr(off, "bad list count".into()));
                                        }
                                    };
                                    let skip = n * vt.size();
                                    if cursor + skip > bytes.len() {
                                        return Err(perr(
                                            bytes.len() as u64,
                                            "truncated payload".into(),
                                        ));
                                    }
                                    cursor += skip;
                                }
                            }
                        }
                    }
                }
            }
        }
        PlyFormat::Ascii => {
            let mut toks = AsciiTokens::new(&bytes, pos);
            for (ei, elem) in elements.iter().enumerate() {
                if ei == vertex_pos {
                    let mut cols: Vec<PlyColumn> = elem
                        .props
                        .iter()
                        .map(|(name, kind)| {
                            let ty = match kind {
                                PropKind::Scalar(t) => *t,
                                PropKind::List(_, t) => *t,
                            };
                            PlyColumn {
                                name: name.clone(),
                                ty,
                                data: if ty.is_float() {
                                    ColumnData::Float(Vec::with_capacity(elem.count))
                                } else {
                                    ColumnData::Int(Vec::with_capacity(elem.count))
                                },
                            }
                        })
                        .collect();
                    for _row in 0..elem.count {
                        for (pi, (name, kind)) in elem.props.iter().enumerate() {
                            match kind {
                                PropKind::Scalar(ty) => {
                                    let (tok, off) = toks.next().ok_or_else(|| {
                                        perr(bytes.len() as u64, "truncated payload".into())
                                    })?;
                                    let v = parse_ascii_scalar(tok, *ty)
                                        .map_err(|m| perr(off, m))?;
                                    push_value(&mut cols[pi], v, *ty, name, off, &perr)?;
                                }
                                PropKind::List(_, vt) => {
                                    let (tok, off) = toks.next().ok_or_else(|| {
                                        perr(bytes.len() as u64, "truncated payload".into())
                                    })?;
                                    let n: usize = tok
                                        .parse()
                                        .map_err(|_| perr(off, "bad list count".into()))?;
                                    for _ in 0..n {
                                        let (tok, off) = toks.next().ok_or_else(|| {
                                            perr(bytes.len() as u64, "truncated payload".into())
                                        })?;
                                        parse_ascii_scalar(tok, *vt).map_err(|m| perr(off, m))?;
                                    }
                                }
                            }
                        }
                    }
                    out = Some(PlyData {
                        format,
                        count: elem.count,
                        columns: cols,
                    });
                    break;
                } else {
                    for _row in 0..elem.count {
                        for (_, kind) in &elem.props {
                            match kind {
                                PropKind::Scalar(_) => {
                                    toks.next().ok_or_else(|| {
                                        perr(bytes.len() as u64, "truncated payload".into())
                                    })?;
                                }
                                PropKind::List(_, _) => {
                                    let (tok, off) = toks.next().ok_or_else(|| {
                                        perr(bytes.len() as u64, "truncated payload".into())
                                    })?;
                                    let n: usize = tok
                                        .parse()
                                        .map_err(|_| perr(off, "bad list count".into()))?;
                                    for _ in 0..n {
                                        toks.next().ok_or_else(|| {
                                            perr(bytes.len() as u64, "truncated payload".into())
                                        })?;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let data = out.expect("vertex element parsed");
    if data.count == 0 {
        return Err(perr(0, "empty vertex element".into()));
    }
    Ok(data)
}

enum Value {
    Float(f64),
    Int(i64),
}

fn read_scalar(bytes: &[u8], cursor: &mut usize, ty: ScalarType) -> std::result::Result<Value, String> {
    let sz = ty.size();
    if *cursor + sz > bytes.len() {
        return Err("truncated payload".into());
    }
    let b = &bytes[*cursor..*cursor + sz];
    *cursor += sz;
    Ok(match ty {
        ScalarType::I8 => Value::Int(b[0] as i8 as i64),
        ScalarType::U8 => Value::Int(b[0] as i64),
        ScalarType::I16 => Value::Int(i16::from_le_bytes([b[0], b[1]]) as i64),
        ScalarType::U16 => Value::Int(u16::from_le_bytes([b[0], b[1]]) as i64),
        ScalarType::I32 => Value::Int(i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as i64),
        ScalarType::U32 => Value::Int(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as i64),
        ScalarType::F32 => Value::Float(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
        ScalarType::F64 => Value::Float(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ])),
    })
}

fn parse_ascii_scalar(tok: &str, ty: ScalarType) -> std::result::Result<Value, String> {
    if ty.is_float() {
        let v: f64 = tok
            .parse()
            .map_err(|_| format!("bad float token `{tok}`"))?;
        Ok(Value::Float(v))
    } else {
        let v: i64 = tok
            .parse()
            .map_err(|_| format!("bad integer token `{tok}`"))?;
        Ok(Value::Int(v))
    }
}

fn push_value(
    col: &mut PlyColumn,
    v: Value,
    ty: ScalarType,
    name: &str,
    off: u64,
    perr: &dyn Fn(u64, String) -> Error,
) -> Result<()> {
    match (&mut col.data, v) {
        (ColumnData::Float(vec), Value::Float(x)) => {
            if !x.is_finite() {
                return Err(perr(off, format!("non-finite value in property `{name}`")));
            }
            vec.push(x);
        }
        (ColumnData::Int(vec), Value::Int(x)) => vec.push(x),
        _ => {
            return Err(perr(off, format!("type mismatch in property `{name}` ({ty:?})")));
        }
    }
    Ok(())
}

struct AsciiTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> AsciiTokens<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        AsciiTokens { bytes, pos }
    }

    #[allow(clippy::should_implement_trait)]
    fn next(&mut self) -> Option<(&'a str, u64)> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .map(|s| (s, start as u64))
    }
}

/// Output column for the writer; data length must equal the vertex count.
pub enum OutData<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
    I32(&'a [i32]),
    U8(&'a [u8]),
}

pub struct OutColumn<'a> {
    pub name: &'a str,
    pub data: OutData<'a>,
}

impl OutData<'_> {
    fn len(&self) -> usize {
        match self {
            OutData::F32(v) => v.len(),
            OutData::F64(v) => v.len(),
            OutData::I32(v) => v.len(),
            OutData::U8(v) => v.len(),
        }
    }

    fn ty(&self) -> ScalarType {
        match self {
            OutData::F32(_) => ScalarType::F32,
            OutData::F64(_) => ScalarType::F64,
            OutData::I32(_) => ScalarType::I32,
            OutData::U8(_) => ScalarType::U8,
        }
    }
}

pub fn write_ply(path: &Path, format: PlyFormat, columns: &[OutColumn]) -> Result<()> {
    assert!(!columns.is_empty());
    let count = columns[0].data.len();
    for c in columns {
        assert_eq!(c.data.len(), count, "column `{}` length mismatch", c.name);
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(b"ply\n");
    match format {
        PlyFormat::Ascii => buf.extend_from_slice(b"format ascii 1.0\n"),
        PlyFormat::BinaryLittleEndian => {
            buf.extend_from_slice(b"format binary_little_endian 1.0\n")
        }
    }
    let _ = writeln!(buf, "element vertex {count}");
    for c in columns {
        let _ = writeln!(buf, "property {} {}", c.data.ty().name(), c.name);
    }
    buf.extend_from_slice(b"end_header\n");

    match format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            for row in 0..count {
                line.clear();
                for (ci, c) in columns.iter().enumerate() {
                    if ci > 0 {
                        line.push(' ');
                    }
                    match &c.data {
                        OutData::F32(v) => line.push_str(&format!("{}", v[row])),
                        OutData::F64(v) => line.push_str(&format!("{}", v[row])),
                        OutData::I32(v) => line.push_str(&format!("{}", v[row])),
                        OutData::U8(v) => line.push_str(&format!("{}", v[row])),
                    }
                }
                line.push('\n');
                buf.extend_from_slice(line.as_bytes());
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for row in 0..count {
                for c in columns {
                    match &c.data {
                        OutData::F32(v) => buf.extend_from_slice(&v[row].to_le_bytes()),
                        OutData::F64(v) => buf.extend_from_slice(&v[row].to_le_bytes()),
                        OutData::I32(v) => buf.extend_from_slice(&v[row].to_le_bytes()),
                        OutData::U8(v) => buf.push(v[row]),
                    }
                }
            }
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}
