//! Binary artifacts: raw input sequences and encoded feature dumps.
//!
//! Both formats are little-endian with an f32 payload regardless of the
//! scalar type a run computed in, so dumps from f32 and f64 runs are
//! directly comparable. Readers track their byte offset and report it with
//! every rejection.
//!
//! Sequence file ("SVSQ"):
//!
//! ```text
//! magic "SVSQ" | u32 version=1 | u32 frames | u32 channels=3
//! u32 height | u32 width | frames * 3 * height * width f32, frame-major
//! ```
//!
//! Feature dump ("SVFT"):
//!
//! ```text
//! magic "SVFT" | u32 version=1 | u32 frames | u32 rows | u32 cols
//! u32 channels | u32 level_count | level_count * (u32 c, u32 h, u32 w)
//! per frame: rows*cols*channels f32, then each level's c*h*w f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::attention::TokenGrid;
use crate::encoder::FrameFeatures;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SEQUENCE_MAGIC: [u8; 4] = *b"SVSQ";
pub const FEATURE_MAGIC: [u8; 4] = *b"SVFT";
pub const FORMAT_VERSION: u32 = 1;

/// FNV-1a, 64 bit. Stable across platforms; used for frame checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Checksum of a float slice as its little-endian byte stream.
pub fn checksum_f32(vals: &[f32]) -> u64 {
    let mut bytes = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}

struct Reader<R> {
    inner: R,
    path: String,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R, path: &Path) -> Reader<R> {
        Reader { inner, path: path.display().to_string(), offset: 0 }
    }

    fn bad(&self, offset: u64, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.clone(), offset, msg: msg.into() }
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.bad(at, format!("file ends inside {what}")))
            }
            Err(e) => Err(Error::Io(e)),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.fill(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let mut got = [0u8; 4];
        self.fill(&mut got, "magic")?;
        if &got != magic {
            return Err(self.bad(0, format!("bad magic {:?}, expected {:?}", got, magic)));
        }
        Ok(())
    }

    fn expect_version(&mut self) -> Result<()> {
        let at = self.offset;
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(self.bad(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.bad(self.offset, "trailing bytes after payload")),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, vals: &[f32]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn dim_u32(path: &Path, offset: u64, what: &str, v: u32) -> Result<usize> {
    if v == 0 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset,
            msg: format!("{what} must be nonzero"),
        });
    }
    Ok(v as usize)
}

/// A decoded input sequence: `frames` of shape `[3, height, width]`.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Tensor<f32>>,
}

impl Sequence {
    /// The frames converted to the run's scalar type.
    pub fn frames_as<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.frames
            .iter()
            .map(|f| Tensor::from_fn(f.shape(), |i| T::from_f64(f.data()[i] as f64)))
            .collect()
    }
}

pub fn write_sequence(path: &Path, frames: &[Tensor<f32>]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::config("cannot write an empty sequence"));
    }
    let shape = frames[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::dim("write_sequence", format!("frames must be [3, h, w], got {shape:?}")));
    }
    for f in frames {
        if f.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "write_sequence",
                lhs: f.shape().to_vec(),
                rhs: shape,
            });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&SEQUENCE_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, frames.len() as u32)?;
    write_u32(&mut w, 3)?;
    write_u32(&mut w, shape[1] as u32)?;
    write_u32(&mut w, shape[2] as u32)?;
    for f in frames {
        write_f32s(&mut w, f.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<Sequence> {
    let mut r = Reader::new(BufReader::new(File::open(path)?), path);
    r.expect_magic(&SEQUENCE_MAGIC)?;
    r.expect_version()?;
    let at = r.offset;
    let frames = dim_u32(path, at, "frame count", r.u32("frame count")?)?;
    let at = r.offset;
    let channels = r.u32("channel count")?;
    if channels != 3 {
        return Err(r.bad(at, format!("expected 3 channels, got {channels}")));
    }
    let at = r.offset;
    let height = dim_u32(path, at, "height", r.u32("height")?)?;
    let at = r.offset;
    let width = dim_u32(path, at, "width", r.u32("width")?)?;

    let per_frame = 3usize
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| r.bad(12, "frame size overflows"))?;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let vals = r.f32s(per_frame, &format!("frame {t}"))?;
        out.push(Tensor::from_vec(&[3, height, width], vals)?);
    }
    r.finish()?;
    Ok(Sequence { height, width, frames: out })
}

/// One stored frame of a feature dump.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub tokens: TokenGrid<f32>,
    pub levels: Vec<Tensor<f32>>,
}

/// Encoded features for a whole sequence, always held as f32.
#[derive(Clone, Debug)]
pub struct FeatureDump {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub frames: Vec<FrameRecord>,
}

fn to_f32_tensor<T: Scalar>(t: &Tensor<T>) -> Tensor<f32> {
    Tensor::from_fn(t.shape(), |i| t.data()[i].to_f64() as f32)
}

impl FeatureDump {
    pub fn from_features<T: Scalar>(frames: &[FrameFeatures<T>]) -> Result<FeatureDump> {
        if frames.is_empty() {
            return Err(Error::config("cannot dump zero encoded frames"));
        }
        let first = &frames[0].tokens;
        let (rows, cols, channels) = (first.rows(), first.cols(), first.channels());
        let level_shapes: Vec<Vec<usize>> = match &frames[0].pyramid {
            Some(p) => p.levels.iter().map(|l| l.shape().to_vec()).collect(),
            None => Vec::new(),
        };
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            if f.tokens.rows() != rows || f.tokens.cols() != cols || f.tokens.channels() != channels
            {
                return Err(Error::ShapeMismatch {
                    op: "feature_dump",
                    lhs: vec![f.tokens.rows(), f.tokens.cols(), f.tokens.channels()],
                    rhs: vec![rows, cols, channels],
                });
            }
            let levels: Vec<Tensor<f32>> = match &f.pyramid {
                Some(p) => p.levels.iter().map(to_f32_tensor).collect(),
                None => Vec::new(),
            };
            if levels.len() != level_shapes.len()
                || levels.iter().zip(&level_shapes).any(|(l, s)| l.shape() != s.as_slice())
            {
                return Err(Error::config("pyramid shapes differ between frames"));
            }
            let tokens = TokenGrid::new(
                rows,
                cols,
                channels,
                f.tokens.data().iter().map(|v| v.to_f64() as f32).collect(),
            )?;
            out.push(FrameRecord { tokens, levels });
        }
        Ok(FeatureDump { rows, cols, channels, frames: out })
    }
}

pub fn write_features(path: &Path, dump: &FeatureDump) -> Result<()> {
    if dump.frames.is_empty() {
        return Err(Error::config("cannot write an empty feature dump"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FEATURE_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, dump.frames.len() as u32)?;
    write_u32(&mut w, dump.rows as u32)?;
    write_u32(&mut w, dump.cols as u32)?;
    write_u32(&mut w, dump.channels as u32)?;
    let levels = &dump.frames[0].levels;
    write_u32(&mut w, levels.len() as u32)?;
    for l in levels {
        let s = l.shape();
        write_u32(&mut w, s[0] as u32)?;
        write_u32(&mut w, s[1] as u32)?;
        write_u32(&mut w, s[2] as u32)?;
    }
    for f in &dump.frames {
        write_f32s(&mut w, f.tokens.data())?;
        for l in &f.levels {
            write_f32s(&mut w, l.data())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureDump> {
    let mut r = Reader::new(BufReader::new(File::open(path)?), path);
    r.expect_magic(&FEATURE_MAGIC)?;
    r.expect_version()?;
    let at = r.offset;
    let frames = dim_u32(path, at, "frame count", r.u32("frame count")?)?;
    let at = r.offset;
    let rows = dim_u32(path, at, "rows", r.u32("rows")?)?;
    let at = r.offset;
    let cols = dim_u32(path, at, "cols", r.u32("cols")?)?;
    let at = r.offset;
    let channels = dim_u32(path, at, "channels", r.u32("channels")?)?;
    let level_count = r.u32("level count")? as usize;
    let mut level_shapes = Vec::with_capacity(level_count);
    for l in 0..level_count {
        let at = r.offset;
        let c = dim_u32(path, at, "level channels", r.u32("level channels")?)?;
        let at = r.offset;
        let h = dim_u32(path, at, "level height", r.u32("level height")?)?;
        let at = r.offset;
        let wd = dim_u32(path, at, "level width", r.u32("level width")?)?;
        let _ = l;
        level_shapes.push([c, h, wd]);
    }

    let per_grid = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| r.bad(12, "grid size overflows"))?;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let vals = r.f32s(per_grid, &format!("frame {t} tokens"))?;
        let tokens = TokenGrid::new(rows, cols, channels, vals)?;
        let mut levels = Vec::with_capacity(level_count);
        for (li, s) in level_shapes.iter().enumerate() {
            let n = s[0]
                .checked_mul(s[1])
                .and_then(|v| v.checked_mul(s[2]))
                .ok_or_else(|| r.bad(12, "level size overflows"))?;
            let vals = r.f32s(n, &format!("frame {t} level {li}"))?;
            levels.push(Tensor::from_vec(&s[..], vals)?);
        }
        out.push(FrameRecord { tokens, levels });
    }
    r.finish()?;
    Ok(FeatureDump { rows, cols, channels, frames: out })
}

/// What `gen_sequence` fills the frames with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceKind {
    /// Independent standard normal pixels.
    Noise,
    /// A Gaussian bump drifting one row down and two columns right per
    /// frame, wrapping at the borders; channels scaled 1.0 / 0.8 / 0.6.
    MovingBlob,
}

impl FromStr for SequenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<SequenceKind> {
        match s {
            "noise" => Ok(SequenceKind::Noise),
            "blob" => Ok(SequenceKind::MovingBlob),
            other => Err(Error::config(format!("unknown sequence kind '{other}' (noise, blob)"))),
        }
    }
}

impl std::fmt::Display for SequenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SequenceKind::Noise => "noise",
            SequenceKind::MovingBlob => "blob",
        })
    }
}

/// Deterministic test sequences, `frames` images of shape `[3, h, w]`.
pub fn gen_sequence(
    kind: SequenceKind,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::config("sequence dimensions must be nonzero"));
    }
    let mut rng = Rng::seed_from(seed);
    let mut out = Vec::with_capacity(frames);
    match kind {
        SequenceKind::Noise => {
            for _ in 0..frames {
                let data: Vec<f32> = (0..3 * height * width).map(|_| rng.normal() as f32).collect();
                out.push(Tensor::from_vec(&[3, height, width], data)?);
            }
        }
        SequenceKind::MovingBlob => {
            let sigma = (height as f64 / 8.0).max(0.5);
            let scales = [1.0f64, 0.8, 0.6];
            for t in 0..frames {
                let cy = (height / 4 + t) % height;
                let cx = (width / 4 + 2 * t) % width;
                let mut data = Vec::with_capacity(3 * height * width);
                for scale in scales {
                    for y in 0..height {
                        let dy = (y as i64 - cy as i64).unsigned_abs() as f64;
                        let dy = dy.min(height as f64 - dy);
                        for x in 0..width {
                            let dx = (x as i64 - cx as i64).unsigned_abs() as f64;
                            let dx = dx.min(width as f64 - dx);
                            let d2 = dy * dy + dx * dx;
                            data.push((scale * (-d2 / (2.0 * sigma * sigma)).exp()) as f32);
                        }
                    }
                }
                out.push(Tensor::from_vec(&[3, height, width], data)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tmp(name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        (dir, path)
    }

    #[test]
    fn checksum_matches_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn sequence_round_trip_is_bit_exact() {
        let (_d, path) = tmp("seq.svsq");
        let frames = gen_sequence(SequenceKind::Noise, 3, 8, 10, 42).unwrap();
        write_sequence(&path, &frames).unwrap();
        let back = read_sequence(&path).unwrap();
        assert_eq!(back.height, 8);
        assert_eq!(back.width, 10);
        assert_eq!(back.frames.len(), 3);
        for (a, b) in frames.iter().zip(&back.frames) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn feature_round_trip_is_bit_exact() {
        let (_d, path) = tmp("feat.svft");
        let mut rng = Rng::seed_from(7);
        let frames: Vec<FrameRecord> = (0..2)
            .map(|_| FrameRecord {
                tokens: TokenGrid::new(
                    2,
                    3,
                    4,
                    (0..24).map(|_| rng.normal() as f32).collect(),
                )
                .unwrap(),
                levels: vec![
                    Tensor::from_fn(&[4, 8, 12], |_| rng.normal() as f32),
                    Tensor::from_fn(&[4, 1, 1], |_| rng.normal() as f32),
                ],
            })
            .collect();
        let dump = FeatureDump { rows: 2, cols: 3, channels: 4, frames };
        write_features(&path, &dump).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.rows, 2);
        assert_eq!(back.cols, 3);
        assert_eq!(back.channels, 4);
        assert_eq!(back.frames.len(), 2);
        for (a, b) in dump.frames.iter().zip(&back.frames) {
            assert!(a.tokens.bits_eq(&b.tokens));
            assert_eq!(a.levels.len(), b.levels.len());
            for (x, y) in a.levels.iter().zip(&b.levels) {
                assert!(x.bits_eq(y));
            }
        }
    }

    #[test]
    fn truncation_reports_the_failing_offset() {
        let (_d, path) = tmp("trunc.svsq");
        let frames = gen_sequence(SequenceKind::Noise, 2, 4, 4, 1).unwrap();
        write_sequence(&path, &frames).unwrap();
        let bytes = fs::read(&path).unwrap();

        // Header is 24 bytes; cut inside the second frame's payload.
        let cut = 24 + 3 * 4 * 4 * 4 + 8;
        fs::write(&path, &bytes[..cut]).unwrap();
        match read_sequence(&path) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 24 + (3 * 4 * 4 * 4) as u64);
                assert!(msg.contains("frame 1"), "{msg}");
            }
            other => panic!("expected a format error, got {other:?}"),
        }

        // Cut inside the header.
        fs::write(&path, &bytes[..9]).unwrap();
        match read_sequence(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes_are_rejected() {
        let (_d, path) = tmp("bad.svsq");
        let frames = gen_sequence(SequenceKind::Noise, 1, 4, 4, 2).unwrap();
        write_sequence(&path, &frames).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        match read_sequence(&path) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"), "{msg}");
            }
            other => panic!("expected a format error, got {other:?}"),
        }

        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        match read_sequence(&path) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 4);
                assert!(msg.contains("version"), "{msg}");
            }
            other => panic!("expected a format error, got {other:?}"),
        }

        let mut bad = good;
        bad.push(0);
        fs::write(&path, &bad).unwrap();
        match read_sequence(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("trailing"), "{msg}"),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn zero_dimensions_are_rejected() {
        let (_d, path) = tmp("zero.svsq");
        let frames = gen_sequence(SequenceKind::Noise, 1, 4, 4, 3).unwrap();
        write_sequence(&path, &frames).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match read_sequence(&path) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 8);
                assert!(msg.contains("nonzero"), "{msg}");
            }
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn generated_sequences_are_seed_deterministic() {
        let a = gen_sequence(SequenceKind::Noise, 2, 6, 6, 11).unwrap();
        let b = gen_sequence(SequenceKind::Noise, 2, 6, 6, 11).unwrap();
        let c = gen_sequence(SequenceKind::Noise, 2, 6, 6, 12).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bits_eq(y)));
        assert!(a.iter().zip(&c).any(|(x, y)| !x.bits_eq(y)));
    }

    #[test]
    fn blob_peak_moves_and_wraps_on_the_torus() {
        let (h, w) = (8, 8);
        let frames = gen_sequence(SequenceKind::MovingBlob, 5, h, w, 0).unwrap();
        for (t, f) in frames.iter().enumerate() {
            let cy = (h / 4 + t) % h;
            let cx = (w / 4 + 2 * t) % w;
            let chan = &f.data()[..h * w];
            let argmax = chan
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!((argmax / w, argmax % w), (cy, cx), "frame {t}");
            assert_eq!(chan[cy * w + cx], 1.0);
            // Channel scaling at the peak.
            let c1 = f.data()[h * w + cy * w + cx];
            let c2 = f.data()[2 * h * w + cy * w + cx];
            assert_eq!(c1, 0.8);
            assert_eq!(c2, 0.6);
        }
        // Frame 3 has wrapped horizontally: 2 + 2*3 = 8 -> column 0.
        let f3_cx = (w / 4 + 2 * 3) % w;
        assert_eq!(f3_cx, 0);
    }

    #[test]
    fn kind_parsing_round_trips() {
        assert_eq!("noise".parse::<SequenceKind>().unwrap(), SequenceKind::Noise);
        assert_eq!("blob".parse::<SequenceKind>().unwrap(), SequenceKind::MovingBlob);
        assert!("wave".parse::<SequenceKind>().is_err());
        assert_eq!(SequenceKind::MovingBlob.to_string(), "blob");
    }
}
