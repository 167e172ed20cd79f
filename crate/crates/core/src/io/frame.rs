use std::fs;
use std::path::{Component, Path, PathBuf};

use super::IoError;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    pub fn range(&self) -> f64 {
        let [x, y, z] = self.xyz();
        (x * x + y * y + z * z).sqrt()
    }
}

/// One LiDAR sweep in sensor coordinates; the sensor sits at the origin.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointFrame {
    pub frame_id: String,
    pub points: Vec<Point>,
}

impl PointFrame {
    pub fn new(frame_id: impl Into<String>, points: Vec<Point>) -> Self {
        Self { frame_id: frame_id.into(), points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.intensity] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(frame_id: impl Into<String>, bytes: &[u8]) -> Result<Self, IoError> {
        if !bytes.len().is_multiple_of(16) {
            return Err(IoError::TruncatedFile { len: bytes.len() as u64, record: 16 });
        }
        let points = bytes
            .chunks_exact(16)
            .enumerate()
            .map(|(index, rec)| {
                let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
                let p = Point::new(f(0), f(1), f(2), f(3));
                if p.x.is_finite() && p.y.is_finite() && p.z.is_finite() {
                    Ok(p)
                } else {
                    Err(IoError::NonFiniteValue { index })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { frame_id: frame_id.into(), points })
    }
}

/// Raw per-point labels as stored in a `.label` file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelFrame {
    pub labels: Vec<u16>,
    pub instance_ids: Vec<u16>,
}

impl LabelFrame {
    pub fn new(labels: Vec<u16>, instance_ids: Vec<u16>) -> Self {
        assert_eq!(labels.len(), instance_ids.len(), "label and instance columns differ in length");
        Self { labels, instance_ids }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.labels
            .iter()
            .zip(&self.instance_ids)
            .flat_map(|(&l, &i)| encode_label_word(l, i).to_le_bytes())
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], n_expected: usize) -> Result<Self, IoError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(IoError::TruncatedFile { len: bytes.len() as u64, record: 4 });
        }
        let found = bytes.len() / 4;
        if found != n_expected {
            return Err(IoError::LengthMismatch { found, expected: n_expected });
        }
        let (labels, instance_ids) = bytes
            .chunks_exact(4)
            .map(|w| decode_label_word(u32::from_le_bytes(w.try_into().unwrap())))
            .unzip();
        Ok(Self { labels, instance_ids })
    }
}

/// Splits a label word into (semantic label, instance id).
pub fn decode_label_word(word: u32) -> (u16, u16) {
    ((word & 0xFFFF) as u16, (word >> 16) as u16)
}

pub fn encode_label_word(label: u16, instance: u16) -> u32 {
    (instance as u32) << 16 | label as u32
}

fn read_all(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IoError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

/// Reads a `.bin` point file; the frame id is the file stem.
pub fn read_point_frame(path: impl AsRef<Path>) -> Result<PointFrame, IoError> {
    let path = path.as_ref();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    PointFrame::from_bytes(id, &read_all(path)?)
}

pub fn read_label_frame(path: impl AsRef<Path>, n_expected: usize) -> Result<LabelFrame, IoError> {
    LabelFrame::from_bytes(&read_all(path.as_ref())?, n_expected)
}

pub fn write_point_frame(frame: &PointFrame, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_all(path.as_ref(), &frame.to_bytes())
}

pub fn write_label_frame(labels: &LabelFrame, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_all(path.as_ref(), &labels.to_bytes())
}

/// Relative path for a frame id; ids may nest (`08/000123`) but never escape.
pub(crate) fn frame_relpath(frame_id: &str, ext: &str) -> Result<PathBuf, IoError> {
    let rel = Path::new(frame_id);
    let ok = !frame_id.is_empty() && rel.components().all(|c| matches!(c, Component::Normal(_)));
    if !ok {
        return Err(IoError::InvalidFrameId(frame_id.to_string()));
    }
    let mut p = rel.to_path_buf();
    p.set_extension(ext);
    Ok(p)
}

/// Writes `velodyne/<id>.bin` and `labels/<id>.label` under `out_dir`.
pub fn write_augmented_frame(
    frame: &PointFrame,
    labels: &LabelFrame,
    out_dir: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf), IoError> {
    if frame.len() != labels.len() {
        return Err(IoError::LengthMismatch { found: labels.len(), expected: frame.len() });
    }
    let out_dir = out_dir.as_ref();
    let bin = out_dir.join("velodyne").join(frame_relpath(&frame.frame_id, "bin")?);
    let label = out_dir.join("labels").join(frame_relpath(&frame.frame_id, "label")?);
    write_point_frame(frame, &bin)?;
    write_label_frame(labels, &label)?;
    Ok((bin, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes_of(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn decodes_hand_built_points() {
        let bytes = bytes_of(&[1.0, 2.0, 3.0, 0.5, -1.0, 0.0, 2.0, 0.1]);
        assert_eq!(bytes.len(), 32);
        let f = PointFrame::from_bytes("f", &bytes).unwrap();
        assert_eq!(f.points, vec![Point::new(1.0, 2.0, 3.0, 0.5), Point::new(-1.0, 0.0, 2.0, 0.1)]);
        assert_eq!(f.to_bytes(), bytes);
    }

    #[test]
    fn empty_and_truncated_point_files() {
        assert!(PointFrame::from_bytes("e", &[]).unwrap().is_empty());
        assert!(matches!(
            PointFrame::from_bytes("t", &[0u8; 17]),
            Err(IoError::TruncatedFile { len: 17, record: 16 })
        ));
        let nan = bytes_of(&[0.0, 0.0, 0.0, 0.0, f32::NAN, 0.0, 0.0, 0.0]);
        assert!(matches!(PointFrame::from_bytes("n", &nan), Err(IoError::NonFiniteValue { index: 1 })));
    }

    #[test]
    fn label_word_split() {
        // 0x0001002A: semantic 0x2A in the low half, instance 1 in the high half
        assert_eq!(decode_label_word(0x0001_002A), (42, 1));
        assert_eq!(decode_label_word(0), (0, 0));
        assert_eq!(decode_label_word(0xFFFF_0000), (0, 0xFFFF));
        let bytes = [0x2A, 0x00, 0x01, 0x00];
        let l = LabelFrame::from_bytes(&bytes, 1).unwrap();
        assert_eq!((l.labels[0], l.instance_ids[0]), (42, 1));
    }

    #[test]
    fn label_length_mismatch() {
        match LabelFrame::from_bytes(&[0u8; 8], 3) {
            Err(IoError::LengthMismatch { found: 2, expected: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn augmented_pair_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frame = PointFrame::new("seq/000001", vec![Point::new(1.0, 2.0, 3.0, 0.5), Point::new(-1.0, 0.0, 2.0, 0.1)]);
        let labels = LabelFrame::new(vec![40, 30], vec![0, 7]);
        let (bin, lab) = write_augmented_frame(&frame, &labels, dir.path()).unwrap();
        let f2 = read_point_frame(&bin).unwrap();
        assert_eq!(f2.points, frame.points);
        assert_eq!(read_label_frame(&lab, 2).unwrap(), labels);
    }

    #[test]
    fn augmented_pair_rejects_mismatch_and_handles_empty() {
        let dir = tempfile::tempdir().unwrap();
        let frame = PointFrame::new("a", vec![Point::default()]);
        assert!(matches!(
            write_augmented_frame(&frame, &LabelFrame::default(), dir.path()),
            Err(IoError::LengthMismatch { .. })
        ));
        let empty = PointFrame::new("b", vec![]);
        let (bin, lab) = write_augmented_frame(&empty, &LabelFrame::default(), dir.path()).unwrap();
        assert_eq!(fs::metadata(&bin).unwrap().len(), 0);
        assert_eq!(fs::metadata(&lab).unwrap().len(), 0);
        assert!(read_point_frame(&bin).unwrap().is_empty());
        assert!(read_label_frame(&lab, 0).unwrap().is_empty());
    }

    #[test]
    fn frame_ids_cannot_escape() {
        assert!(frame_relpath("../x", "bin").is_err());
        assert!(frame_relpath("/abs", "bin").is_err());
        assert!(frame_relpath("", "bin").is_err());
        assert_eq!(frame_relpath("08/000123", "bin").unwrap(), PathBuf::from("08/000123.bin"));
    }
}
