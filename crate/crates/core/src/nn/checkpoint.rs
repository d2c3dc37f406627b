use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, Layer, NetworkParams};
use crate::error::{format_err, Error, Result};

const PARAMS_MAGIC: &[u8; 8] = b"MSNNPARM";
const PARAMS_VERSION: u32 = 1;
const INDEX_FILE: &str = "index.csv";

/// Parameter snapshots keyed by epoch, with the validation accuracy of each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointStore {
    params: BTreeMap<usize, NetworkParams>,
    val_acc: BTreeMap<usize, f64>,
    best: Option<usize>,
}

impl CheckpointStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a copy of `params`. Epochs must be strictly increasing; the best
    /// epoch moves only on a strictly higher accuracy, so ties keep the earlier one.
    pub fn checkpoint(&mut self, epoch: usize, params: &NetworkParams, val_acc: f64) -> Result<()> {
        if self
            .params
            .keys()
            .next_back()
            .is_some_and(|&last| epoch <= last)
        {
            return Err(Error::DuplicateEpoch(epoch));
        }
        self.params.insert(epoch, params.clone());
        self.val_acc.insert(epoch, val_acc);
        let improved = match self.best {
            None => true,
            Some(b) => val_acc > self.val_acc[&b],
        };
        if improved {
            self.best = Some(epoch);
        }
        Ok(())
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.params.keys().next_back().copied()
    }

    pub fn epochs(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }

    pub fn get(&self, epoch: usize) -> Option<&NetworkParams> {
        self.params.get(&epoch)
    }

    pub fn val_accuracy(&self, epoch: usize) -> Option<f64> {
        self.val_acc.get(&epoch).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Writes one parameter file per epoch plus an `index.csv` (epoch, val_acc, file).
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = String::from("epoch,val_acc,file\n");
        for (epoch, params) in &self.params {
            let name = format!("epoch-{epoch:05}.params");
            let mut file = fs::File::create(dir.join(&name))?;
            write_params(&mut file, params)?;
            index.push_str(&format!("{epoch},{:?},{name}\n", self.val_acc[epoch]));
        }
        fs::write(dir.join(INDEX_FILE), index)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        if !index_path.exists() {
            return Err(Error::MissingInput(index_path));
        }
        let index = fs::read_to_string(&index_path)?;
        let mut store = CheckpointStore::new();
        for line in index.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(format_err("checkpoint index", format!("bad line {line:?}")));
            }
            let epoch: usize = fields[0]
                .parse()
                .map_err(|_| format_err("checkpoint index", "bad epoch"))?;
            let acc: f64 = fields[1]
                .parse()
                .map_err(|_| format_err("checkpoint index", "bad accuracy"))?;
            let mut file = fs::File::open(dir.join(fields[2]))?;
            let params = read_params(&mut file)?;
            store.checkpoint(epoch, &params, acc)?;
        }
        Ok(store)
    }
}

/// Little-endian binary encoding: magic, format version, activation tag,
/// layer count, then per layer `out`, `in`, row-major weights and bias.
pub fn write_params<W: Write>(w: &mut W, params: &NetworkParams) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    let tag: u8 = match params.activation() {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    };
    w.write_all(&[tag])?;
    w.write_all(&(params.num_layers() as u32).to_le_bytes())?;
    for layer in params.layers() {
        w.write_all(&(layer.output_dim() as u32).to_le_bytes())?;
        w.write_all(&(layer.input_dim() as u32).to_le_bytes())?;
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<NetworkParams> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != PARAMS_MAGIC {
        return Err(format_err("parameter", "bad magic"));
    }
    let version = read_u32(r)?;
    if version != PARAMS_VERSION {
        return Err(format_err(
            "parameter",
            format!("unsupported version {version}"),
        ));
    }
    let mut tag = [0u8; 1];
    read_exact(r, &mut tag)?;
    let activation = match tag[0] {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        t => {
            return Err(format_err(
                "parameter",
                format!("unknown activation tag {t}"),
            ))
        }
    };
    let count = read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let out = read_u32(r)? as usize;
        let inp = read_u32(r)? as usize;
        let mut values = vec![0.0; out * inp + out];
        for v in &mut values {
            let mut buf = [0u8; 8];
            read_exact(r, &mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let bias = Array1::from(values.split_off(out * inp));
        let weight = Array2::from_shape_vec((out, inp), values)
            .map_err(|e| format_err("parameter", e.to_string()))?;
        layers.push(Layer { weight, bias });
    }
    NetworkParams::new(layers, activation)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err("parameter", "truncated"),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> NetworkParams {
        NetworkParams::init(
            &[3, 5, 2],
            Activation::Tanh,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn best_epoch_tracking() {
        let mut s = CheckpointStore::new();
        s.checkpoint(4, &net(0), 0.3).unwrap();
        assert_eq!(s.best_epoch(), Some(4));

        let mut s = CheckpointStore::new();
        for (e, a) in [(1, 0.5), (2, 0.9), (3, 0.7)] {
            s.checkpoint(e, &net(e as u64), a).unwrap();
        }
        assert_eq!(s.best_epoch(), Some(2));

        let mut s = CheckpointStore::new();
        s.checkpoint(2, &net(0), 0.8).unwrap();
        s.checkpoint(5, &net(1), 0.8).unwrap();
        assert_eq!(s.best_epoch(), Some(2));
    }

    #[test]
    fn duplicate_epoch_rejected() {
        let mut s = CheckpointStore::new();
        s.checkpoint(3, &net(0), 0.1).unwrap();
        assert!(matches!(
            s.checkpoint(3, &net(0), 0.2),
            Err(Error::DuplicateEpoch(3))
        ));
        assert!(matches!(
            s.checkpoint(1, &net(0), 0.2),
            Err(Error::DuplicateEpoch(1))
        ));
    }

    #[test]
    fn stored_copy_is_independent() {
        let mut p = net(0);
        let mut s = CheckpointStore::new();
        s.checkpoint(1, &p, 0.1).unwrap();
        p.layers_mut()[0].bias.fill(9.0);
        assert_ne!(s.get(1).unwrap(), &p);
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let p = net(11);
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        let back = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(back, p);
        for (a, b) in p.layers().iter().zip(back.layers()) {
            for (x, y) in a.weight.iter().zip(b.weight.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(read_params(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_params(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn store_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CheckpointStore::new();
        s.checkpoint(1, &net(1), 0.25).unwrap();
        s.checkpoint(2, &net(2), 0.75).unwrap();
        s.save_dir(dir.path()).unwrap();
        assert_eq!(CheckpointStore::load_dir(dir.path()).unwrap(), s);
    }
}
