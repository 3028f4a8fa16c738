use nalgebra::Vector3;

use super::ParseError;
use crate::geometry::PointCloud;

/// Parses an ASCII PLY file, reading the `vertex` element's `x`, `y`, `z`
/// (and `nx`, `ny`, `nz` when present). Elements other than `vertex` are
/// skipped.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud, ParseError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ParseError::byte(e.valid_up_to(), "PLY is not valid UTF-8"))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(ParseError::line(1, "missing 'ply' magic")),
    }
    // (name, count, property names, list property present)
    let mut elements: Vec<(String, usize, Vec<String>, bool)> = Vec::new();
    let mut format_seen = false;
    let mut last_line = 1;
    loop {
        let Some((ln, line)) = lines.next() else {
            return Err(ParseError::line(last_line + 1, "header ended before end_header"));
        };
        last_line = ln;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                if toks.get(1) != Some(&"ascii") {
                    return Err(ParseError::line(ln, "only ASCII PLY is supported"));
                }
                format_seen = true;
            }
            Some("element") => {
                let (Some(name), Some(count)) = (toks.get(1), toks.get(2)) else {
                    return Err(ParseError::line(ln, "malformed element line"));
                };
                let count = count.parse::<usize>().map_err(|_| ParseError::line(ln, "invalid element count"))?;
                elements.push((name.to_string(), count, Vec::new(), false));
            }
            Some("property") => {
                let Some(el) = elements.last_mut() else {
                    return Err(ParseError::line(ln, "property before element"));
                };
                if toks.get(1) == Some(&"list") {
                    if toks.len() != 5 {
                        return Err(ParseError::line(ln, "malformed list property"));
                    }
                    el.3 = true;
                    el.2.push(toks[4].to_string());
                } else if toks.len() == 3 {
                    el.2.push(toks[2].to_string());
                } else {
                    return Err(ParseError::line(ln, "malformed property line"));
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(ParseError::line(ln, format!("unknown header keyword '{other}'"))),
        }
    }
    if !format_seen {
        return Err(ParseError::line(last_line, "missing format line"));
    }

    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut has_normals = false;
    let mut found_vertex = false;
    for (name, count, props, has_list) in &elements {
        let is_vertex = name == "vertex";
        let idx = |n: &str| props.iter().position(|p| p == n);
        let xyz = if is_vertex {
            if *has_list {
                return Err(ParseError::line(last_line, "list properties on vertex are not supported"));
            }
            found_vertex = true;
            match (idx("x"), idx("y"), idx("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => return Err(ParseError::line(last_line, "vertex element lacks x, y, z")),
            }
        } else {
            None
        };
        let nrm = match (idx("nx"), idx("ny"), idx("nz")) {
            (Some(x), Some(y), Some(z)) if is_vertex => Some([x, y, z]),
            _ => None,
        };
        has_normals |= nrm.is_some();
        for k in 0..*count {
            let Some((ln, line)) = lines.next() else {
                return Err(ParseError::line(
                    last_line + 1,
                    format!("element '{name}' truncated: {k} of {count} records present"),
                ));
            };
            last_line = ln;
            let Some(xyz) = xyz else { continue };
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != props.len() {
                return Err(ParseError::line(ln, format!("expected {} values, found {}", props.len(), toks.len())));
            }
            let val = |i: usize| -> Result<f64, ParseError> {
                toks[i].parse::<f64>().map_err(|_| ParseError::line(ln, format!("invalid number '{}'", toks[i])))
            };
            let p = Vector3::new(val(xyz[0])?, val(xyz[1])?, val(xyz[2])?);
            if !p.iter().all(|v| v.is_finite()) {
                continue;
            }
            points.push(p);
            if let Some([a, b, c]) = nrm {
                let n = Vector3::new(val(a)?, val(b)?, val(c)?);
                let ok = n.iter().all(|v| v.is_finite()) && n.norm() > 1e-12;
                normals.push(if ok { n.normalize() } else { Vector3::zeros() });
            }
        }
    }
    if !found_vertex {
        return Err(ParseError::line(last_line, "no vertex element"));
    }
    Ok(PointCloud { points, normals: has_normals.then_some(normals), timestamps: None })
}
