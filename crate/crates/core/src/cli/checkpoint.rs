//! Binary checkpoints: settings, image grid, random stream position and every weight tensor.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, PatchGrid};

use super::config::Settings;

const MAGIC: &[u8; 8] = b"TDECCKPT";
pub const VERSION: u32 = 1;

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub settings: Settings,
    pub model: Model,
    pub rng: ChaCha8Rng,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u64(buf, b.len() as u64);
    buf.extend_from_slice(b);
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, settings: &Settings, rng: &ChaCha8Rng) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut buf, settings.to_text().as_bytes());
    let g = &model.config.grid;
    for v in [g.channels, g.height, g.width] {
        put_u64(&mut buf, v as u64);
    }
    buf.extend_from_slice(&rng.get_seed());
    put_u64(&mut buf, rng.get_stream());
    buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    let named = model.params.named();
    put_u64(&mut buf, named.len() as u64);
    for (name, t) in named {
        put_bytes(&mut buf, name.as_bytes());
        put_u64(&mut buf, t.rank() as u64);
        for &d in t.shape() {
            put_u64(&mut buf, d as u64);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of requested length"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > self.bytes.len() as u64 {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        Ok(v as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let bytes = self.take(n)?.to_vec();
        String::from_utf8(bytes).map_err(|_| Error::format(self.path, "checkpoint text is not UTF-8"))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, path };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint version {} is not supported (expected {})", version, VERSION),
        ));
    }
    let text = r.string()?;
    let settings = Settings::parse(&text).map_err(|e| Error::format(path, format!("stored settings: {}", e)))?;
    let (c, h, w) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
    let grid = PatchGrid::new(c, h, w)?;
    let mut rng = ChaCha8Rng::from_seed(r.array()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.array()?));

    let config = settings.model.model_config(grid, settings.run.use_transformer);
    config.validate()?;
    // Shapes come from the architecture; the file must agree with them.
    let mut params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let count = r.u64()? as usize;
    if count != names.len() {
        return Err(Error::format(
            path,
            format!("checkpoint holds {} tensors, architecture needs {}", count, names.len()),
        ));
    }
    for (slot, expected) in params.leaves_mut().into_iter().zip(&names) {
        let name = r.string()?;
        if &name != expected {
            return Err(Error::format(path, format!("expected tensor {}, found {}", expected, name)));
        }
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != slot.shape() {
            return Err(Error::format(
                path,
                format!("tensor {} has shape {:?}, expected {:?}", name, shape, slot.shape()),
            ));
        }
        let raw = r.take(slot.len() * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *slot = Tensor::new(shape, data)?;
    }
    if !r.bytes.is_empty() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    Ok(Checkpoint {
        settings,
        model: Model { config, params },
        rng,
    })
}
