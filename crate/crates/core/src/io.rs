//! On-disk formats: binary feature files, label and annotation CSVs, and
//! low-level little-endian helpers shared with checkpoint serialization.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::seq::{AnnotationEntry, FeatureSequence, PhaseLabelSequence, Provenance};

pub const FEATURE_MAGIC: &[u8; 4] = b"PSEQ";
pub const FEATURE_VERSION: u32 = 1;

/// Write `bytes` to `path` via a temporary sibling and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// --- little-endian primitives on byte buffers ------------------------------

pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f32(buf: &mut Vec<u8>, v: f32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Cursor over a byte slice with checked little-endian reads.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

// --- feature files ----------------------------------------------------------

/// Serialize feature frames as magic, version, T, D, then T*D f32 values in
/// row-major order.
pub fn write_features(path: &Path, feats: &FeatureSequence) -> Result<()> {
    let (t, d) = feats.frames().dim();
    let mut buf = Vec::with_capacity(16 + t * d * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut buf, FEATURE_VERSION);
    put_u32(&mut buf, t as u32);
    put_u32(&mut buf, d as u32);
    for row in feats.frames().rows() {
        for &v in row {
            put_f32(&mut buf, v as f32);
        }
    }
    atomic_write(path, &buf)
}

/// Read a feature file written by [`write_features`].
pub fn read_features(path: &Path, video_id: &str, fps: f64) -> Result<FeatureSequence> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = ByteReader::new(&buf, "feature file");
    if r.bytes(4)? != FEATURE_MAGIC {
        return Err(Error::Parse(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    if t == 0 || d == 0 {
        return Err(Error::Parse(format!("{}: empty dimensions {t}x{d}", path.display())));
    }
    if r.remaining() != t * d * 4 {
        return Err(Error::Parse(format!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            r.remaining(),
            t * d * 4
        )));
    }
    let mut frames = Array2::<f64>::zeros((t, d));
    for i in 0..t {
        for j in 0..d {
            frames[[i, j]] = r.f32()? as f64;
        }
    }
    FeatureSequence::new(frames, fps, video_id)
}

// --- label CSV ---------------------------------------------------------------

/// Write a dense per-frame label file with header `frame_index,phase_index`.
pub fn write_label_csv(path: &Path, labels: &PhaseLabelSequence) -> Result<()> {
    let mut out = String::from("frame_index,phase_index\n");
    for (t, &l) in labels.labels().iter().enumerate() {
        out.push_str(&format!("{t},{l}\n"));
    }
    atomic_write(path, out.as_bytes())
}

/// Read a dense label file: rows must cover frames 0..T-1 in ascending order.
pub fn read_label_csv(path: &Path, num_phases: usize) -> Result<PhaseLabelSequence> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("frame_index,phase_index") => {}
        other => {
            return Err(Error::Parse(format!(
                "{}: expected header frame_index,phase_index, got {other:?}",
                path.display()
            )))
        }
    }
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (f, l) = split2(line, path, i + 2)?;
        if f != labels.len() {
            return Err(Error::Parse(format!(
                "{}: line {}: frame {} out of order (expected {})",
                path.display(),
                i + 2,
                f,
                labels.len()
            )));
        }
        labels.push(l);
    }
    PhaseLabelSequence::new(labels, num_phases)
}

fn split2(line: &str, path: &Path, lineno: usize) -> Result<(usize, usize)> {
    let mut it = line.split(',');
    let a = it.next().unwrap_or("");
    let b = it.next().unwrap_or("");
    if it.next().is_some() {
        return Err(Error::Parse(format!(
            "{}: line {lineno}: expected 2 fields",
            path.display()
        )));
    }
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Parse(format!("{}: line {lineno}: bad integer {s:?}", path.display())))
    };
    Ok((parse(a)?, parse(b)?))
}

// --- annotation CSVs ----------------------------------------------------------

/// Write sparse ground-truth annotations for many videos, header
/// `video_id,frame_index,phase_index`. Videos appear in the given order.
pub fn write_annotation_csv(path: &Path, videos: &[(String, Vec<(usize, usize)>)]) -> Result<()> {
    let mut out = String::from("video_id,frame_index,phase_index\n");
    for (id, rows) in videos {
        check_video_id(id)?;
        for &(f, l) in rows {
            out.push_str(&format!("{id},{f},{l}\n"));
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Read a sparse annotation file. Returns (video_id, [(frame, label)]) groups
/// in first-appearance order; frame ranges are validated by the caller, which
/// knows each video's length.
pub fn read_annotation_csv(path: &Path) -> Result<Vec<(String, Vec<(usize, usize)>)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("video_id,frame_index,phase_index") => {}
        other => {
            return Err(Error::Parse(format!(
                "{}: expected header video_id,frame_index,phase_index, got {other:?}",
                path.display()
            )))
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let id = it.next().unwrap_or("").to_string();
        let rest: Vec<&str> = it.collect();
        if rest.len() != 2 {
            return Err(Error::Parse(format!(
                "{}: line {}: expected 3 fields",
                path.display(),
                i + 2
            )));
        }
        let f = parse_usize(rest[0], path, i + 2)?;
        let l = parse_usize(rest[1], path, i + 2)?;
        match order.iter().position(|o| *o == id) {
            Some(k) => groups[k].push((f, l)),
            None => {
                order.push(id);
                groups.push(vec![(f, l)]);
            }
        }
    }
    Ok(order.into_iter().zip(groups).collect())
}

/// Write pseudo-label dumps, header `video_id,frame_index,label,provenance`.
pub fn write_pseudo_label_csv(path: &Path, videos: &[(String, Vec<AnnotationEntry>)]) -> Result<()> {
    let mut out = String::from("video_id,frame_index,label,provenance\n");
    for (id, entries) in videos {
        check_video_id(id)?;
        for e in entries {
            out.push_str(&format!("{id},{},{},{}\n", e.frame, e.label, e.provenance.as_str()));
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Read a pseudo-label dump written by [`write_pseudo_label_csv`].
pub fn read_pseudo_label_csv(path: &Path) -> Result<Vec<(String, Vec<AnnotationEntry>)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("video_id,frame_index,label,provenance") => {}
        other => {
            return Err(Error::Parse(format!(
                "{}: expected header video_id,frame_index,label,provenance, got {other:?}",
                path.display()
            )))
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<AnnotationEntry>> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "{}: line {}: expected 4 fields",
                path.display(),
                i + 2
            )));
        }
        let id = fields[0].to_string();
        let frame = parse_usize(fields[1], path, i + 2)?;
        let label = parse_usize(fields[2], path, i + 2)?;
        let provenance = match fields[3] {
            "ground_truth" => Provenance::GroundTruth,
            "pseudo" => Provenance::Pseudo,
            other => {
                return Err(Error::Parse(format!(
                    "{}: line {}: unknown provenance {other:?}",
                    path.display(),
                    i + 2
                )))
            }
        };
        let entry = AnnotationEntry { frame, label, provenance };
        match order.iter().position(|o| *o == id) {
            Some(k) => groups[k].push(entry),
            None => {
                order.push(id);
                groups.push(vec![entry]);
            }
        }
    }
    Ok(order.into_iter().zip(groups).collect())
}

fn parse_usize(s: &str, path: &Path, lineno: usize) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::Parse(format!("{}: line {lineno}: bad integer {s:?}", path.display())))
}

fn check_video_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(',') || id.contains('\n') {
        return Err(Error::InvalidParameter(format!("video id {id:?} not CSV-safe")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn feature_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pseq");
        let feats =
            FeatureSequence::new(array![[1.0, 2.5], [-3.0, 0.125], [7.0, -8.0]], 1.0, "a").unwrap();
        write_features(&path, &feats).unwrap();
        let back = read_features(&path, "a", 1.0).unwrap();
        assert_eq!(back.frames(), feats.frames());
        assert_eq!(back.video_id(), "a");
    }

    #[test]
    fn feature_file_layout_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pseq");
        let feats = FeatureSequence::new(array![[1.0]], 1.0, "b").unwrap();
        write_features(&path, &feats).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PSEQ");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1); // version
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1); // T
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1); // D
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 20);
    }

    #[test]
    fn feature_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pseq");
        let feats = FeatureSequence::new(array![[1.0, 2.0]], 1.0, "c").unwrap();
        write_features(&path, &feats).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(read_features(&path, "c", 1.0).is_err());
        let mut bad = fs::read(&path).unwrap();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(read_features(&path, "c", 1.0).is_err());
    }

    #[test]
    fn label_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let labels = PhaseLabelSequence::new(vec![0, 0, 1, 2, 2], 3).unwrap();
        write_label_csv(&path, &labels).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("frame_index,phase_index\n0,0\n1,0\n2,1\n"));
        let back = read_label_csv(&path, 3).unwrap();
        assert_eq!(back, labels);
    }

    #[test]
    fn label_csv_rejects_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gap.csv");
        fs::write(&path, "frame_index,phase_index\n0,0\n2,1\n").unwrap();
        assert!(read_label_csv(&path, 3).is_err());
    }

    #[test]
    fn annotation_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        let videos = vec![
            ("v1".to_string(), vec![(3, 0), (10, 1)]),
            ("v2".to_string(), vec![(0, 2)]),
        ];
        write_annotation_csv(&path, &videos).unwrap();
        let back = read_annotation_csv(&path).unwrap();
        assert_eq!(back, videos);
    }

    #[test]
    fn pseudo_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pl.csv");
        let videos = vec![(
            "v1".to_string(),
            vec![
                AnnotationEntry { frame: 2, label: 1, provenance: Provenance::GroundTruth },
                AnnotationEntry { frame: 3, label: 1, provenance: Provenance::Pseudo },
            ],
        )];
        write_pseudo_label_csv(&path, &videos).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("v1,2,1,ground_truth\n"));
        assert!(text.contains("v1,3,1,pseudo\n"));
        let back = read_pseudo_label_csv(&path).unwrap();
        assert_eq!(back, videos);
    }
}
