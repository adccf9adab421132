//! OBJ and PLY readers.

use std::path::Path;

use nalgebra::Point3;

use super::mesh::TriMesh;
use super::GeometryError;

/// Parsed geometry file: a triangle mesh, or a bare point cloud when the
/// file has no faces.
#[derive(Debug, Clone)]
pub enum LoadedGeometry {
    Mesh(TriMesh),
    Cloud(Vec<Point3<f64>>),
}

impl LoadedGeometry {
    pub fn points(&self) -> &[Point3<f64>] {
        match self {
            LoadedGeometry::Mesh(m) => &m.vertices,
            LoadedGeometry::Cloud(c) => c,
        }
    }

    /// Uniformly scales all coordinates, e.g. by 0.01 for centimeter files.
    pub fn scaled(mut self, factor: f64) -> Self {
        let pts = match &mut self {
            LoadedGeometry::Mesh(m) => &mut m.vertices,
            LoadedGeometry::Cloud(c) => c,
        };
        for p in pts.iter_mut() {
            p.coords *= factor;
        }
        self
    }
}

/// Reads an `.obj` or `.ply` file, chosen by extension.
pub fn load_geometry(path: &Path) -> Result<LoadedGeometry, GeometryError> {
    let bytes = std::fs::read(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "obj" => parse_obj(std::str::from_utf8(&bytes).map_err(|e| GeometryError::Parse(e.to_string()))?),
        "ply" => parse_ply(&bytes),
        _ => Err(GeometryError::Parse(format!("unsupported geometry extension {:?}", ext))),
    }
}

fn finish(vertices: Vec<Point3<f64>>, triangles: Vec<[usize; 3]>) -> Result<LoadedGeometry, GeometryError> {
    if triangles.is_empty() {
        Ok(LoadedGeometry::Cloud(vertices))
    } else {
        Ok(LoadedGeometry::Mesh(TriMesh::new(vertices, triangles)?))
    }
}

/// Wavefront OBJ: `v` and `f` records; polygons are fan-triangulated.
pub fn parse_obj(text: &str) -> Result<LoadedGeometry, GeometryError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let mut it = line.split_whitespace();
        let err = |m: &str| GeometryError::Parse(format!("obj line {}: {}", ln + 1, m));
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(&e.to_string()))?;
                if c.len() != 3 {
                    return Err(err("vertex needs 3 coordinates"));
                }
                vertices.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| err("bad face index"))?;
                    let i = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                    if i < 0 || i as usize >= vertices.len() {
                        return Err(err("face index out of range"));
                    }
                    idx.push(i as usize);
                }
                if idx.len() < 3 {
                    return Err(err("face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    finish(vertices, triangles)
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// PLY reader for `ascii` and `binary_little_endian` files.
pub fn parse_ply(bytes: &[u8]) -> Result<LoadedGeometry, GeometryError> {
    let perr = |m: String| GeometryError::Parse(format!("ply: {m}"));
    let end = find_subslice(bytes, b"end_header").ok_or_else(|| perr("missing end_header".into()))?;
    let mut body = end + b"end_header".len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) == Some(&b'\n') {
        body += 1;
    }
    let header = std::str::from_utf8(&bytes[..end]).map_err(|e| perr(e.to_string()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(perr("missing magic".into()));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.first().copied() {
            Some("format") => {
                binary = Some(match t.get(1).copied() {
                    Some("ascii") => false,
                    Some("binary_little_endian") => true,
                    other => return Err(perr(format!("unsupported format {other:?}"))),
                })
            }
            Some("element") => {
                if t.len() < 3 {
                    return Err(perr("bad element line".into()));
                }
                let count = t[2].parse().map_err(|_| perr("bad element count".into()))?;
                elements.push(Element { name: t[1].to_string(), count, props: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| perr("property before element".into()))?;
                let bad = || perr(format!("bad property line {line:?}"));
                if t.get(1) == Some(&"list") {
                    if t.len() < 5 {
                        return Err(bad());
                    }
                    let c = Scalar::parse(t[2]).ok_or_else(bad)?;
                    let v = Scalar::parse(t[3]).ok_or_else(bad)?;
                    el.props.push(Property::List(t[4].to_string(), c, v));
                } else {
                    if t.len() < 3 {
                        return Err(bad());
                    }
                    let s = Scalar::parse(t[1]).ok_or_else(bad)?;
                    el.props.push(Property::Scalar(t[2].to_string(), s));
                }
            }
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| perr("missing format".into()))?;
    let data = &bytes[body..];

    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut reader: Box<dyn ValueReader> = if binary {
        Box::new(BinReader { data, pos: 0 })
    } else {
        let text = std::str::from_utf8(data).map_err(|e| perr(e.to_string()))?;
        Box::new(AsciiReader { tokens: text.split_whitespace() })
    };
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [f64::NAN; 3];
            let mut face: Vec<usize> = Vec::new();
            for p in &el.props {
                match p {
                    Property::Scalar(name, s) => {
                        let v = reader.next(*s).ok_or_else(|| perr("truncated data".into()))?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            _ => {}
                        }
                    }
                    Property::List(name, c, s) => {
                        let n = reader.next(*c).ok_or_else(|| perr("truncated data".into()))? as usize;
                        for _ in 0..n {
                            let v = reader.next(*s).ok_or_else(|| perr("truncated data".into()))?;
                            if name == "vertex_indices" || name == "vertex_index" {
                                face.push(v as usize);
                            }
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => {
                    if xyz.iter().any(|v| v.is_nan()) {
                        return Err(perr("vertex without x/y/z".into()));
                    }
                    vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
                }
                "face" if face.len() >= 3 => {
                    for k in 1..face.len() - 1 {
                        triangles.push([face[0], face[k], face[k + 1]]);
                    }
                }
                _ => {}
            }
        }
    }
    finish(vertices, triangles)
}

trait ValueReader {
    fn next(&mut self, s: Scalar) -> Option<f64>;
}

struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl ValueReader for BinReader<'_> {
    fn next(&mut self, s: Scalar) -> Option<f64> {
        let n = s.size();
        let b = self.data.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s.read_le(b))
    }
}

struct AsciiReader<'a> {
    tokens: std::str::SplitWhitespace<'a>,
}

impl ValueReader for AsciiReader<'_> {
    fn next(&mut self, _s: Scalar) -> Option<f64> {
        self.tokens.next()?.parse().ok()
    }
}

fn find_subslice(h: &[u8], n: &[u8]) -> Option<usize> {
    h.windows(n.len()).position(|w| w == n)
}

/// Serializes a mesh as OBJ text.
pub fn write_obj(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for t in &mesh.triangles {
        s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn obj_round_trip() {
        let m = TriMesh::cuboid(Vector3::new(0.04, 0.04, 0.04));
        match parse_obj(&write_obj(&m)).unwrap() {
            LoadedGeometry::Mesh(r) => {
                assert_eq!(r.vertices, m.vertices);
                assert_eq!(r.triangles, m.triangles);
            }
            _ => panic!("expected mesh"),
        }
    }

    #[test]
    fn obj_quads_and_slashes() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n";
        match parse_obj(text).unwrap() {
            LoadedGeometry::Mesh(m) => assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]),
            _ => panic!(),
        }
    }

    #[test]
    fn ply_ascii_cloud_and_mesh() {
        let cloud = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty float ny\nproperty float nz\nend_header\n0 0 0 0 0 1\n1 2 3 0 0 1\n";
        match parse_ply(cloud.as_bytes()).unwrap() {
            LoadedGeometry::Cloud(c) => assert_eq!(c[1], Point3::new(1.0, 2.0, 3.0)),
            _ => panic!(),
        }
        let mesh = "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        match parse_ply(mesh.as_bytes()).unwrap() {
            LoadedGeometry::Mesh(m) => assert_eq!(m.triangles, vec![[0, 1, 2]]),
            _ => panic!(),
        }
    }

    #[test]
    fn ply_binary_little_endian() {
        let mut b = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar uint vertex_indices\nend_header\n".to_vec();
        for v in [[0.0f32, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.5]] {
            for c in v {
                b.extend_from_slice(&c.to_le_bytes());
            }
        }
        b.push(3);
        for i in [0u32, 1, 2] {
            b.extend_from_slice(&i.to_le_bytes());
        }
        match parse_ply(&b).unwrap() {
            LoadedGeometry::Mesh(m) => {
                assert_eq!(m.vertices[2], Point3::new(0.0, 1.0, 0.5));
                assert_eq!(m.triangles, vec![[0, 1, 2]]);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(parse_obj("f 1 2 3\n").is_err());
        assert!(parse_ply(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n").is_err());
        assert!(parse_ply(b"not a ply").is_err());
    }
}
