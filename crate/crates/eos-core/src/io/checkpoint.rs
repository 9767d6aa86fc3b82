//! Checkpoint file: magic "EOSC", version, algorithm tag, architecture
//! fields, seed, step, the flat f32 parameter vector, and optimizer state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::autodiff::ParamVector;
use crate::nn::{Head, QNetwork, QNetworkSpec};
use crate::rl::OptimizerState;

use super::{read_exact_or_truncated, read_f32, read_u16, read_u64, IoError};

const MAGIC: &[u8; 4] = b"EOSC";
const VERSION: u16 = 1;

/// A network plus enough bookkeeping to resume or audit a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: QNetwork,
    pub step: u64,
    pub opt_state: Option<OptimizerState>,
}

fn head_tag(head: &Head) -> (u8, u16, u16) {
    match *head {
        Head::Dqn { num_actions } => (0, num_actions as u16, 0),
        Head::C51 { num_actions, num_atoms } => (1, num_actions as u16, num_atoms as u16),
    }
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> Result<(), IoError> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl std::io::Read) -> Result<Vec<f32>, IoError> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f32(r)?);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    let spec = &ckpt.network.spec;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (algo, num_actions, num_atoms) = head_tag(&spec.head);
    w.write_all(&[algo])?;
    for dim in [
        spec.input_h as u16,
        spec.input_w as u16,
        spec.input_c as u16,
        num_actions,
        num_atoms,
        spec.conv_filters as u16,
        spec.kernel as u16,
        spec.fc_width as u16,
    ] {
        w.write_all(&dim.to_le_bytes())?;
    }
    w.write_all(&ckpt.network.seed.to_le_bytes())?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    write_f32s(&mut w, ckpt.network.params.values())?;
    match &ckpt.opt_state {
        None => w.write_all(&[0u8])?,
        Some(OptimizerState::Sgd) => w.write_all(&[1u8])?,
        Some(OptimizerState::HeavyBall { velocity }) => {
            w.write_all(&[2u8])?;
            write_f32s(&mut w, velocity)?;
        }
        Some(OptimizerState::Adam { m, v, t }) => {
            w.write_all(&[3u8])?;
            write_f32s(&mut w, m)?;
            write_f32s(&mut w, v)?;
            w.write_all(&t.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic { expected: "EOSC" });
    }
    let version = read_u16(&mut r)?;
    if version > VERSION {
        return Err(IoError::UnsupportedVersion { found: version, supported: VERSION });
    }
    let mut algo = [0u8; 1];
    read_exact_or_truncated(&mut r, &mut algo)?;
    let h = read_u16(&mut r)? as usize;
    let w = read_u16(&mut r)? as usize;
    let c = read_u16(&mut r)? as usize;
    let num_actions = read_u16(&mut r)? as usize;
    let num_atoms = read_u16(&mut r)? as usize;
    let conv_filters = read_u16(&mut r)? as usize;
    let kernel = read_u16(&mut r)? as usize;
    let fc_width = read_u16(&mut r)? as usize;
    let head = match algo[0] {
        0 => Head::Dqn { num_actions },
        1 => Head::C51 { num_actions, num_atoms },
        other => {
            return Err(IoError::BadRow { line: 0, detail: format!("unknown algorithm tag {other}") })
        }
    };
    let mut spec = QNetworkSpec::new((h, w, c), head);
    spec.conv_filters = conv_filters;
    spec.kernel = kernel;
    spec.fc_width = fc_width;
    let seed = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    let values = read_f32s(&mut r)?;
    let params = ParamVector::new(spec.layout(), values)
        .map_err(|e| IoError::BadRow { line: 0, detail: e.to_string() })?;
    let mut tag = [0u8; 1];
    read_exact_or_truncated(&mut r, &mut tag)?;
    let opt_state = match tag[0] {
        0 => None,
        1 => Some(OptimizerState::Sgd),
        2 => Some(OptimizerState::HeavyBall { velocity: read_f32s(&mut r)? }),
        3 => {
            let m = read_f32s(&mut r)?;
            let v = read_f32s(&mut r)?;
            let t = read_u64(&mut r)?;
            Some(OptimizerState::Adam { m, v, t })
        }
        other => {
            return Err(IoError::BadRow { line: 0, detail: format!("unknown optimizer tag {other}") })
        }
    };
    Ok(Checkpoint { network: QNetwork { spec, params, seed }, step, opt_state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.eosc");
        let net = QNetwork::init(QNetworkSpec::c51_breakout(51), 21);
        let ckpt = Checkpoint {
            network: net.clone(),
            step: 12345,
            opt_state: Some(OptimizerState::Adam {
                m: vec![0.5; net.params.len()],
                v: vec![0.25; net.params.len()],
                t: 99,
            }),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 12345);
        assert_eq!(loaded.network.spec, net.spec);
        assert_eq!(loaded.network.params.values(), net.params.values());
        // Same Q-values on a probe observation.
        let obs: Vec<f32> = (0..net.spec.obs_len()).map(|i| (i % 9 == 0) as u8 as f32).collect();
        let atoms: Vec<f32> = (0..51).map(|i| -10.0 + 0.4 * i as f32).collect();
        assert_eq!(
            net.q_values(&obs, Some(&atoms)).unwrap(),
            loaded.network.q_values(&obs, Some(&atoms)).unwrap()
        );
        match loaded.opt_state {
            Some(OptimizerState::Adam { t: 99, .. }) => {}
            other => panic!("optimizer state mangled: {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(IoError::BadMagic { .. })));
    }
}
