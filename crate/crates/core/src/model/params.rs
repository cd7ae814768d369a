use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Variant;
use crate::datamodel::{write_atomic, Head};
use crate::error::{Error, Result};
use crate::ingest::{write_f64s, ByteReader};
use crate::numkernel::{ops::CONV_WIDTH, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NWSM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Default width of the convolutional trunk.
pub const DEFAULT_HIDDEN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub variant: Variant,
    /// Fused input feature width.
    pub din: usize,
    /// Trunk width.
    pub d: usize,
    pub c_verb: usize,
    pub c_noun: usize,
    pub shared_trunk: bool,
}

impl ModelShape {
    pub fn classes(&self, head: Head) -> usize {
        match head {
            Head::Verb => self.c_verb,
            Head::Noun => self.c_noun,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.din == 0 || self.d == 0 || self.c_verb == 0 || self.c_noun == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Expected `(rows, cols)` of every parameter block in storage order.
    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        let trunks = if self.shared_trunk { 1 } else { 2 };
        let mut shapes = Vec::new();
        for _ in 0..trunks {
            shapes.push((CONV_WIDTH * self.din, self.d));
            shapes.push((1, self.d));
        }
        for head in Head::BOTH {
            let c = self.classes(head);
            shapes.push((self.variant.attention_rows(c), self.d));
            shapes.push((self.d, self.variant.output_classes(c)));
        }
        shapes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `(3·Din)×d`, blocks for offsets -1, 0, +1.
    pub kernel: Matrix,
    /// `1×d`.
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// Label embeddings: `C×d` class-aware, `1×d` class-agnostic, `0×d` supervised.
    pub attention: Matrix,
    /// `d×C` classifier shared by frame scores and clip prediction (`d×(C+1)` supervised).
    pub classifier: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub trunks: Vec<ConvParams>,
    pub heads: [HeadParams; 2],
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
    Matrix::new(rows, cols, data).expect("shape")
}

impl ModelParams {
    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_trunks = if shape.shared_trunk { 1 } else { 2 };
        let trunks = (0..n_trunks)
            .map(|_| ConvParams {
                kernel: glorot(
                    &mut rng,
                    CONV_WIDTH * shape.din,
                    shape.d,
                    CONV_WIDTH * shape.din,
                    shape.d,
                ),
                bias: Matrix::zeros(1, shape.d),
            })
            .collect();
        let mut head = |c: usize| {
            let rows = shape.variant.attention_rows(c);
            let out = shape.variant.output_classes(c);
            HeadParams {
                attention: glorot(&mut rng, rows, shape.d, shape.d, rows.max(1)),
                classifier: glorot(&mut rng, shape.d, out, shape.d, out),
            }
        };
        let heads = [head(shape.c_verb), head(shape.c_noun)];
        Ok(Self { shape, trunks, heads })
    }

    pub fn trunk(&self, head: Head) -> &ConvParams {
        match head {
            Head::Noun if self.trunks.len() > 1 => &self.trunks[1],
            _ => &self.trunks[0],
        }
    }

    pub fn head(&self, head: Head) -> &HeadParams {
        &self.heads[head as usize]
    }

    pub fn head_mut(&mut self, head: Head) -> &mut HeadParams {
        &mut self.heads[head as usize]
    }

    /// Parameter blocks in storage order: trunk kernels/biases, then per head attention, classifier.
    pub fn blocks(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for t in &self.trunks {
            out.push(&t.kernel);
            out.push(&t.bias);
        }
        for h in &self.heads {
            out.push(&h.attention);
            out.push(&h.classifier);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for t in &mut self.trunks {
            out.push(&mut t.kernel);
            out.push(&mut t.bias);
        }
        for h in &mut self.heads {
            out.push(&mut h.attention);
            out.push(&mut h.classifier);
        }
        out
    }

    pub fn from_blocks(shape: ModelShape, blocks: Vec<Matrix>) -> Result<Self> {
        shape.validate()?;
        let expected = shape.block_shapes();
        if blocks.len() != expected.len() {
            return Err(Error::Config(format!(
                "{} parameter blocks, expected {}",
                blocks.len(),
                expected.len()
            )));
        }
        for (i, (b, e)) in blocks.iter().zip(&expected).enumerate() {
            if b.shape() != *e {
                return Err(Error::Config(format!("block {i} is {:?}, expected {e:?}", b.shape())));
            }
        }
        let mut it = blocks.into_iter();
        let n_trunks = if shape.shared_trunk { 1 } else { 2 };
        let trunks = (0..n_trunks)
            .map(|_| ConvParams {
                kernel: it.next().expect("checked"),
                bias: it.next().expect("checked"),
            })
            .collect();
        let mut head = || HeadParams {
            attention: it.next().expect("checked"),
            classifier: it.next().expect("checked"),
        };
        let heads = [head(), head()];
        Ok(Self { shape, trunks, heads })
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }

    pub fn encode(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let s = &self.shape;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[s.variant.tag(), s.shared_trunk as u8])?;
        for v in [s.c_verb, s.c_noun, s.d, s.din] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let blocks = self.blocks();
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for b in blocks {
            w.write_all(&(b.rows() as u32).to_le_bytes())?;
            w.write_all(&(b.cols() as u32).to_le_bytes())?;
            write_f64s(w, b.data())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.encode(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        r.expect_version(CHECKPOINT_VERSION)?;
        let tag_at = r.offset();
        let tag = r.u8()?;
        let variant = Variant::from_tag(tag).ok_or_else(|| r.error_at(tag_at, format!("unknown variant tag {tag}")))?;
        let shared_trunk = r.u8()? != 0;
        let c_verb = r.u32()? as usize;
        let c_noun = r.u32()? as usize;
        let d = r.u32()? as usize;
        let din = r.u32()? as usize;
        let shape = ModelShape {
            variant,
            din,
            d,
            c_verb,
            c_noun,
            shared_trunk,
        };
        let count_at = r.offset();
        let count = r.u32()? as usize;
        let expected = shape.block_shapes();
        if count != expected.len() {
            return Err(r.error_at(count_at, format!("{count} blocks, expected {}", expected.len())));
        }
        let mut blocks = Vec::with_capacity(count);
        for e in &expected {
            let at = r.offset();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if (rows, cols) != *e {
                return Err(r.error_at(at, format!("block is {rows}x{cols}, expected {}x{}", e.0, e.1)));
            }
            blocks.push(Matrix::new(rows, cols, r.f64s(rows * cols)?)?);
        }
        if r.remaining() != 0 {
            return Err(r.error_at(r.offset(), format!("{} trailing bytes", r.remaining())));
        }
        Self::from_blocks(shape, blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(variant: Variant, shared: bool) -> ModelShape {
        ModelShape {
            variant,
            din: 4,
            d: 6,
            c_verb: 3,
            c_noun: 5,
            shared_trunk: shared,
        }
    }

    #[test]
    fn block_shapes_per_variant() {
        let p = ModelParams::init(shape(Variant::Ours, true), 1).unwrap();
        assert_eq!(p.head(Head::Verb).attention.shape(), (3, 6));
        assert_eq!(p.head(Head::Noun).classifier.shape(), (6, 5));
        let a = ModelParams::init(shape(Variant::ClsAgno, true), 1).unwrap();
        assert_eq!(a.head(Head::Noun).attention.shape(), (1, 6));
        let s = ModelParams::init(shape(Variant::Ful, false), 1).unwrap();
        assert_eq!(s.head(Head::Verb).attention.shape(), (0, 6));
        assert_eq!(s.head(Head::Verb).classifier.shape(), (6, 4));
        assert_eq!(s.trunks.len(), 2);
        assert_ne!(s.trunk(Head::Verb), s.trunk(Head::Noun));
    }

    #[test]
    fn init_bounds_and_determinism() {
        let sh = shape(Variant::Ours, true);
        let a = ModelParams::init(sh, 9).unwrap();
        assert_eq!(a, ModelParams::init(sh, 9).unwrap());
        assert_ne!(a, ModelParams::init(sh, 10).unwrap());
        let bound = (6.0 / (12.0f64 + 6.0)).sqrt();
        assert!(a.trunks[0].kernel.data().iter().all(|v| v.abs() <= bound));
        assert!(a.trunks[0].bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        for variant in [Variant::Ours, Variant::ClsAgno, Variant::NarrBas, Variant::Ful] {
            for shared in [true, false] {
                let p = ModelParams::init(shape(variant, shared), 4).unwrap();
                let mut buf = Vec::new();
                p.encode(&mut buf).unwrap();
                assert_eq!(ModelParams::decode(&buf, Path::new("m")).unwrap(), p);
                assert!(matches!(
                    ModelParams::decode(&buf[..buf.len() - 3], Path::new("m")),
                    Err(Error::Format { .. })
                ));
            }
        }
        assert!(ModelParams::decode(b"NWSD\x01\0\0\0", Path::new("m")).is_err());
    }
}
