//! Point-cloud and mesh files: XYZ, PLY (ascii / binary little-endian) and
//! OBJ.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;

/// Raw (un-normalized) points with optional normals, as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_point_cloud(path: &Path) -> Result<RawCloud> {
    match extension(path).as_str() {
        "xyz" | "txt" | "pts" => read_xyz(path),
        "ply" => {
            let ply = read_ply(path)?;
            Ok(RawCloud {
                points: ply.points,
                normals: ply.normals,
            })
        }
        _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

pub fn write_point_cloud(path: &Path, cloud: &RawCloud) -> Result<()> {
    match extension(path).as_str() {
        "xyz" | "txt" | "pts" => write_xyz(path, cloud),
        "ply" => write_ply(path, &cloud.points, cloud.normals.as_deref(), &[]),
        _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let mesh = match extension(path).as_str() {
        "obj" => read_obj(path)?,
        "ply" => {
            let ply = read_ply(path)?;
            if ply.faces.is_empty() {
                return Err(parse_err(path, "no faces"));
            }
            TriangleMesh {
                vertices: ply.points,
                triangles: ply.faces,
                normals: ply.normals,
            }
        }
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    };
    mesh.validate().map_err(|e| parse_err(path, e.to_string()))?;
    Ok(mesh)
}

pub fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    match extension(path).as_str() {
        "obj" => write_obj(path, mesh),
        "ply" => write_ply(path, &mesh.vertices, mesh.normals.as_deref(), &mesh.triangles),
        _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

fn parse_floats(path: &Path, lineno: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| parse_err(path, format!("line {lineno}: bad number {f:?}")))
        })
        .collect()
}

fn read_xyz(path: &Path) -> Result<RawCloud> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut with_normals = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let has_n = match fields.len() {
            3 => false,
            6 => true,
            k => return Err(parse_err(path, format!("line {}: expected 3 or 6 values, got {k}", n + 1))),
        };
        if *with_normals.get_or_insert(has_n) != has_n {
            return Err(parse_err(path, format!("line {}: inconsistent column count", n + 1)));
        }
        let v = parse_floats(path, n + 1, &fields)?;
        points.push(Vec3::new(v[0], v[1], v[2]));
        if has_n {
            normals.push(Vec3::new(v[3], v[4], v[5]));
        }
    }
    Ok(RawCloud {
        points,
        normals: with_normals.unwrap_or(false).then_some(normals),
    })
}

fn write_xyz(path: &Path, cloud: &RawCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, p) in cloud.points.iter().enumerate() {
        write!(w, "{} {} {}", p.x, p.y, p.z)?;
        if let Some(ns) = &cloud.normals {
            let n = ns[i];
            write!(w, " {} {} {}", n.x, n.y, n.z)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path)?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let f: Vec<&str> = it.take(3).collect();
                if f.len() != 3 {
                    return Err(parse_err(path, format!("line {}: short vertex", n + 1)));
                }
                let v = parse_floats(path, n + 1, &f)?;
                vertices.push(Vec3::new(v[0], v[1], v[2]));
            }
            Some("f") => {
                // "f a b c ..." with optional "/vt/vn" suffixes; polygons are fanned.
                let mut idx = Vec::new();
                for tok in it {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: i64 = head
                        .parse()
                        .map_err(|_| parse_err(path, format!("line {}: bad face index {tok:?}", n + 1)))?;
                    let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                    if resolved < 0 {
                        return Err(parse_err(path, format!("line {}: face index {i} out of range", n + 1)));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(parse_err(path, format!("line {}: face with fewer than 3 vertices", n + 1)));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(TriangleMesh {
        vertices,
        triangles,
        normals: None,
    })
}

fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    if let Some(ns) = &mesh.normals {
        for n in ns {
            writeln!(w, "vn {} {} {}", n.x, n.y, n.z)?;
        }
        for t in &mesh.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            writeln!(w, "f {a}//{a} {b}//{b} {c}//{c}")?;
        }
    } else {
        for t in &mesh.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct PlyData {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    faces: Vec<[u32; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Pulls scalars out of either the ascii token stream or the binary body.
enum Body<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary(&'a [u8]),
}

impl Body<'_> {
    fn next(&mut self, ty: Scalar) -> Option<f64> {
        match self {
            Body::Ascii(tokens) => tokens.next()?.parse().ok(),
            Body::Binary(rest) => {
                let n = ty.size();
                if rest.len() < n {
                    return None;
                }
                let v = ty.read_le(&rest[..n]);
                *rest = &rest[n..];
                Some(v)
            }
        }
    }
}

fn read_ply(path: &Path) -> Result<PlyData> {
    let bytes = fs::read(path)?;
    let end = find_header_end(&bytes).ok_or_else(|| parse_err(path, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end.0]).map_err(|_| parse_err(path, "header is not utf-8"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(parse_err(path, "not a ply file"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(parse_err(path, format!("unsupported ply format {other}"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| parse_err(path, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", cty, ity, name] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(path, "property before element"))?;
                let (c, i) = Scalar::parse(cty)
                    .zip(Scalar::parse(ity))
                    .ok_or_else(|| parse_err(path, format!("unknown list type in {line:?}")))?;
                el.props.push(Property::List(name.to_string(), c, i));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(path, "property before element"))?;
                let t = Scalar::parse(ty).ok_or_else(|| parse_err(path, format!("unknown type {ty}")))?;
                el.props.push(Property::Scalar(name.to_string(), t));
            }
            ["comment", ..] | ["obj_info", ..] | [] | ["end_header"] => {}
            _ => return Err(parse_err(path, format!("unexpected header line {line:?}"))),
        }
    }
    let binary = binary.ok_or_else(|| parse_err(path, "missing format line"))?;
    let body_bytes = &bytes[end.1..];
    let text;
    let mut body = if binary {
        Body::Binary(body_bytes)
    } else {
        text = std::str::from_utf8(body_bytes).map_err(|_| parse_err(path, "ascii body is not utf-8"))?;
        Body::Ascii(text.split_ascii_whitespace())
    };

    let mut out = PlyData {
        points: Vec::new(),
        normals: None,
        faces: Vec::new(),
    };
    let truncated = || parse_err(path, "truncated body");
    for el in &elements {
        let names: Vec<&str> = el
            .props
            .iter()
            .map(|p| match p {
                Property::Scalar(n, _) | Property::List(n, _, _) => n.as_str(),
            })
            .collect();
        let slot = |n: &str| names.iter().position(|x| *x == n);
        let is_vertex = el.name == "vertex";
        let pos = [slot("x"), slot("y"), slot("z")];
        let nrm = [slot("nx"), slot("ny"), slot("nz")];
        let has_normals = nrm.iter().all(Option::is_some);
        if is_vertex && pos.iter().any(Option::is_none) {
            return Err(parse_err(path, "vertex element lacks x/y/z"));
        }
        let mut normals = Vec::new();
        let mut vals = vec![0.0; el.props.len()];
        for _ in 0..el.count {
            let mut face: Option<Vec<u32>> = None;
            for (k, p) in el.props.iter().enumerate() {
                match p {
                    Property::Scalar(_, t) => vals[k] = body.next(*t).ok_or_else(truncated)?,
                    Property::List(name, ct, it) => {
                        let n = body.next(*ct).ok_or_else(truncated)? as usize;
                        let mut items = Vec::with_capacity(n);
                        for _ in 0..n {
                            items.push(body.next(*it).ok_or_else(truncated)? as u32);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            face = Some(items);
                        }
                    }
                }
            }
            if is_vertex {
                let g = |s: [Option<usize>; 3]| Vec3::new(vals[s[0].unwrap()], vals[s[1].unwrap()], vals[s[2].unwrap()]);
                out.points.push(g(pos));
                if has_normals {
                    normals.push(g(nrm));
                }
            }
            if let Some(idx) = face {
                if idx.len() < 3 {
                    return Err(parse_err(path, "face with fewer than 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    out.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
        }
        if is_vertex && has_normals {
            out.normals = Some(normals);
        }
    }
    Ok(out)
}

/// Returns (end of header text, start of body).
fn find_header_end(bytes: &[u8]) -> Option<(usize, usize)> {
    let tag = b"end_header";
    let at = bytes.windows(tag.len()).position(|w| w == tag)?;
    let mut body = at + tag.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) == Some(&b'\n') {
        body += 1;
    }
    Some((at, body))
}

/// Writes binary little-endian PLY with double-precision coordinates.
fn write_ply(path: &Path, points: &[Vec3], normals: Option<&[Vec3]>, faces: &[[u32; 3]]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply\nformat binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    for c in ["x", "y", "z"] {
        writeln!(w, "property double {c}")?;
    }
    if normals.is_some() {
        for c in ["nx", "ny", "nz"] {
            writeln!(w, "property double {c}")?;
        }
    }
    if !faces.is_empty() {
        writeln!(w, "element face {}", faces.len())?;
        writeln!(w, "property list uchar uint vertex_indices")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in points.iter().enumerate() {
        for c in p.iter() {
            w.write_all(&c.to_le_bytes())?;
        }
        if let Some(ns) = normals {
            for c in ns[i].iter() {
                w.write_all(&c.to_le_bytes())?;
            }
        }
    }
    for f in faces {
        w.write_all(&[3u8])?;
        for i in f {
            w.write_all(&i.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_round_trip_with_normals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        let cloud = RawCloud {
            points: vec![Vec3::new(0.1, -2.0, 3.5), Vec3::new(1e-9, 0.0, 7.25)],
            normals: Some(vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0)]),
        };
        write_point_cloud(&path, &cloud).unwrap();
        assert_eq!(read_point_cloud(&path).unwrap(), cloud);
    }

    #[test]
    fn xyz_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        fs::write(&path, "0 0 0\n1 2\n").unwrap();
        assert!(matches!(read_point_cloud(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn ascii_ply_with_quads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment unit square\nelement vertex 4\nproperty float x\nproperty float y\n\
             property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n\
             0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n",
        )
        .unwrap();
        let m = read_mesh(&path).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!((m.area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let mesh = TriangleMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.3)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        write_mesh(&path, &mesh).unwrap();
        assert_eq!(read_mesh(&path).unwrap(), mesh);
    }

    #[test]
    fn obj_round_trip_and_negative_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        let mut mesh = TriangleMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        write_mesh(&path, &mesh).unwrap();
        assert_eq!(read_mesh(&path).unwrap(), mesh);
        mesh.compute_vertex_normals();
        write_mesh(&path, &mesh).unwrap();
        assert_eq!(read_mesh(&path).unwrap().triangles, mesh.triangles);

        fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3/1 -2/2 -1/3\n").unwrap();
        assert_eq!(read_mesh(&path).unwrap().triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn unknown_extension() {
        assert!(matches!(
            read_point_cloud(Path::new("cloud.las")),
            Err(Error::UnsupportedFormat(_))
        ));
    }
}
