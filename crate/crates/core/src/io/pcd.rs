use nalgebra::Vector3;

use super::ParseError;
use crate::geometry::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq)]
enum FieldType {
    Float,
    Signed,
    Unsigned,
}

#[derive(Debug, Clone)]
struct Field {
    name: String,
    size: usize,
    kind: FieldType,
    count: usize,
    /// Byte offset within a binary record.
    offset: usize,
    /// Token offset within an ASCII record.
    token: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum DataKind {
    Ascii,
    Binary,
}

struct Header {
    fields: Vec<Field>,
    points: usize,
    data: DataKind,
    /// Byte offset of the first data byte.
    data_start: usize,
    /// Line number of the first ASCII data line.
    data_line: usize,
}

fn parse_usize(tok: &str, line: usize, what: &str) -> Result<usize, ParseError> {
    tok.parse::<usize>().map_err(|_| ParseError::line(line, format!("invalid {what} '{tok}'")))
}

fn parse_header(bytes: &[u8]) -> Result<Header, ParseError> {
    let mut names: Option<Vec<String>> = None;
    let mut sizes: Option<Vec<usize>> = None;
    let mut types: Option<Vec<FieldType>> = None;
    let mut counts: Option<Vec<usize>> = None;
    let mut width: Option<usize> = None;
    let mut height: usize = 1;
    let mut points: Option<usize> = None;
    let mut pos = 0usize;
    let mut line_no = 0usize;

    loop {
        if pos >= bytes.len() {
            return Err(ParseError::byte(pos, "header ended before DATA line"));
        }
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map(|e| pos + e).unwrap_or(bytes.len());
        line_no += 1;
        let raw = &bytes[pos..end];
        let line = std::str::from_utf8(raw).map_err(|_| ParseError::line(line_no, "header is not valid UTF-8"))?;
        let next = (end + 1).min(bytes.len().max(end));
        let line = line.trim();
        pos = next;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let key = toks.next().unwrap_or_default().to_ascii_uppercase();
        let rest: Vec<&str> = toks.collect();
        match key.as_str() {
            "VERSION" | "VIEWPOINT" => {}
            "FIELDS" => names = Some(rest.iter().map(|s| s.to_string()).collect()),
            "SIZE" => sizes = Some(rest.iter().map(|t| parse_usize(t, line_no, "SIZE")).collect::<Result<_, _>>()?),
            "TYPE" => {
                types = Some(
                    rest.iter()
                        .map(|t| match *t {
                            "F" | "f" => Ok(FieldType::Float),
                            "I" | "i" => Ok(FieldType::Signed),
                            "U" | "u" => Ok(FieldType::Unsigned),
                            other => Err(ParseError::line(line_no, format!("unknown TYPE '{other}'"))),
                        })
                        .collect::<Result<_, _>>()?,
                )
            }
            "COUNT" => counts = Some(rest.iter().map(|t| parse_usize(t, line_no, "COUNT")).collect::<Result<_, _>>()?),
            "WIDTH" => width = Some(parse_usize(rest.first().copied().unwrap_or(""), line_no, "WIDTH")?),
            "HEIGHT" => height = parse_usize(rest.first().copied().unwrap_or(""), line_no, "HEIGHT")?,
            "POINTS" => points = Some(parse_usize(rest.first().copied().unwrap_or(""), line_no, "POINTS")?),
            "DATA" => {
                let data = match rest.first().map(|s| s.to_ascii_lowercase()).as_deref() {
                    Some("ascii") => DataKind::Ascii,
                    Some("binary") => DataKind::Binary,
                    Some("binary_compressed") => {
                        return Err(ParseError::line(line_no, "DATA binary_compressed is not supported"))
                    }
                    _ => return Err(ParseError::line(line_no, "DATA must be ascii or binary")),
                };
                let names = names.ok_or_else(|| ParseError::line(line_no, "missing FIELDS"))?;
                let n = names.len();
                let sizes = sizes.unwrap_or_else(|| vec![4; n]);
                let types = types.unwrap_or_else(|| vec![FieldType::Float; n]);
                let counts = counts.unwrap_or_else(|| vec![1; n]);
                if sizes.len() != n || types.len() != n || counts.len() != n {
                    return Err(ParseError::line(line_no, "FIELDS/SIZE/TYPE/COUNT lengths differ"));
                }
                let mut fields = Vec::with_capacity(n);
                let (mut offset, mut token) = (0usize, 0usize);
                for i in 0..n {
                    let ok = match types[i] {
                        FieldType::Float => matches!(sizes[i], 4 | 8),
                        _ => matches!(sizes[i], 1 | 2 | 4 | 8),
                    };
                    if !ok || counts[i] == 0 || counts[i] > 1 << 16 {
                        return Err(ParseError::line(line_no, format!("unsupported field '{}'", names[i])));
                    }
                    fields.push(Field {
                        name: names[i].clone(),
                        size: sizes[i],
                        kind: types[i],
                        count: counts[i],
                        offset,
                        token,
                    });
                    offset += sizes[i] * counts[i];
                    token += counts[i];
                }
                let from_dims = width.map(|w| w.checked_mul(height));
                let points = match (points, from_dims) {
                    (Some(p), _) => p,
                    (None, Some(Some(p))) => p,
                    _ => return Err(ParseError::line(line_no, "missing POINTS/WIDTH")),
                };
                return Ok(Header { fields, points, data, data_start: pos, data_line: line_no + 1 });
            }
            other => return Err(ParseError::line(line_no, format!("unknown header key '{other}'"))),
        }
    }
}

fn decode(bytes: &[u8], kind: FieldType) -> f64 {
    match (kind, bytes.len()) {
        (FieldType::Float, 4) => f32::from_le_bytes(bytes.try_into().unwrap()) as f64,
        (FieldType::Float, 8) => f64::from_le_bytes(bytes.try_into().unwrap()),
        (FieldType::Signed, 1) => i8::from_le_bytes([bytes[0]]) as f64,
        (FieldType::Signed, 2) => i16::from_le_bytes(bytes.try_into().unwrap()) as f64,
        (FieldType::Signed, 4) => i32::from_le_bytes(bytes.try_into().unwrap()) as f64,
        (FieldType::Signed, 8) => i64::from_le_bytes(bytes.try_into().unwrap()) as f64,
        (FieldType::Unsigned, 1) => bytes[0] as f64,
        (FieldType::Unsigned, 2) => u16::from_le_bytes(bytes.try_into().unwrap()) as f64,
        (FieldType::Unsigned, 4) => u32::from_le_bytes(bytes.try_into().unwrap()) as f64,
        (FieldType::Unsigned, 8) => u64::from_le_bytes(bytes.try_into().unwrap()) as f64,
        _ => f64::NAN,
    }
}

struct Layout {
    xyz: [usize; 3],
    normal: Option<[usize; 3]>,
}

fn layout(fields: &[Field]) -> Result<Layout, String> {
    let find = |n: &str| fields.iter().position(|f| f.name == n);
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err("FIELDS must include x, y and z".into()),
    };
    let normal = match (find("normal_x"), find("normal_y"), find("normal_z")) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        _ => None,
    };
    Ok(Layout { xyz, normal })
}

fn push_point(
    points: &mut Vec<Vector3<f64>>,
    normals: &mut Vec<Vector3<f64>>,
    p: Vector3<f64>,
    n: Option<Vector3<f64>>,
) {
    // invalid (NaN) points are dropped, as PCL writes them for missing returns
    if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
        return;
    }
    points.push(p);
    if let Some(n) = n {
        let ok = n.iter().all(|v| v.is_finite()) && n.norm() > 1e-12;
        normals.push(if ok { n.normalize() } else { Vector3::zeros() });
    }
}

/// Parses a PCD v0.7 file (ASCII or binary). Points with non-finite
/// coordinates are dropped; `normal_*` fields, when present, become normals.
pub fn parse_pcd(bytes: &[u8]) -> Result<PointCloud, ParseError> {
    let header = parse_header(bytes)?;
    let lay = layout(&header.fields).map_err(|m| ParseError::line(header.data_line.saturating_sub(1), m))?;
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let data = &bytes[header.data_start.min(bytes.len())..];

    match header.data {
        DataKind::Binary => {
            let row: usize = header.fields.iter().map(|f| f.size * f.count).sum();
            let need = header
                .points
                .checked_mul(row)
                .ok_or_else(|| ParseError::byte(header.data_start, "POINTS too large"))?;
            if data.len() < need {
                let complete = data.len() / row.max(1);
                return Err(ParseError::byte(
                    header.data_start + complete * row,
                    format!("binary data truncated: {} of {} points present", complete, header.points),
                ));
            }
            points.reserve(header.points);
            let val = |rec: &[u8], fi: usize| {
                let f = &header.fields[fi];
                decode(&rec[f.offset..f.offset + f.size], f.kind)
            };
            for rec in data[..need].chunks_exact(row.max(1)).take(header.points) {
                let p = Vector3::new(val(rec, lay.xyz[0]), val(rec, lay.xyz[1]), val(rec, lay.xyz[2]));
                let n = lay.normal.map(|[a, b, c]| Vector3::new(val(rec, a), val(rec, b), val(rec, c)));
                push_point(&mut points, &mut normals, p, n);
            }
        }
        DataKind::Ascii => {
            let text = std::str::from_utf8(data)
                .map_err(|e| ParseError::byte(header.data_start + e.valid_up_to(), "ASCII data is not valid UTF-8"))?;
            let tokens_per_row: usize = header.fields.iter().map(|f| f.count).sum();
            let mut read = 0usize;
            let mut line_no = header.data_line - 1;
            for line in text.lines() {
                line_no += 1;
                if read == header.points {
                    break;
                }
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != tokens_per_row {
                    return Err(ParseError::line(
                        line_no,
                        format!("expected {tokens_per_row} values, found {}", toks.len()),
                    ));
                }
                let val = |fi: usize| -> Result<f64, ParseError> {
                    let t = toks[header.fields[fi].token];
                    t.parse::<f64>().map_err(|_| ParseError::line(line_no, format!("invalid number '{t}'")))
                };
                let p = Vector3::new(val(lay.xyz[0])?, val(lay.xyz[1])?, val(lay.xyz[2])?);
                let n = match lay.normal {
                    Some([a, b, c]) => Some(Vector3::new(val(a)?, val(b)?, val(c)?)),
                    None => None,
                };
                push_point(&mut points, &mut normals, p, n);
                read += 1;
            }
            if read < header.points {
                return Err(ParseError::line(
                    line_no + 1,
                    format!("ASCII data truncated: {read} of {} points present", header.points),
                ));
            }
        }
    }
    Ok(PointCloud { points, normals: lay.normal.map(|_| normals), timestamps: None })
}

fn header_text(cloud: &PointCloud, data: &str, size: usize) -> String {
    let (fields, n) = if cloud.has_normals() { ("x y z normal_x normal_y normal_z", 6) } else { ("x y z", 3) };
    let rep = |s: &str| vec![s; n].join(" ");
    format!(
        "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS {fields}\nSIZE {}\nTYPE {}\nCOUNT {}\nWIDTH {}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {}\nDATA {data}\n",
        rep(&size.to_string()),
        rep("F"),
        rep("1"),
        cloud.len(),
        cloud.len()
    )
}

/// Binary PCD with `F4` fields (normals included when present).
pub fn write_pcd_binary(cloud: &PointCloud) -> Vec<u8> {
    let mut out = header_text(cloud, "binary", 4).into_bytes();
    let stride = if cloud.has_normals() { 24 } else { 12 };
    out.reserve(cloud.len() * stride);
    for (i, p) in cloud.points.iter().enumerate() {
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(ns) = &cloud.normals {
            for v in ns[i].iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// ASCII PCD with `F8` fields, written with round-trip precision.
pub fn write_pcd_ascii(cloud: &PointCloud) -> String {
    let mut out = header_text(cloud, "ascii", 8);
    for (i, p) in cloud.points.iter().enumerate() {
        out.push_str(&format!("{} {} {}", p.x, p.y, p.z));
        if let Some(ns) = &cloud.normals {
            let n = ns[i];
            out.push_str(&format!(" {} {} {}", n.x, n.y, n.z));
        }
        out.push('\n');
    }
    out
}
