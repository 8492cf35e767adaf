//! Versioned binary checkpoint: the full configuration snapshot, scalar
//! metadata, and every named parameter and optimizer-moment array, bit-exact
//! through save/load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::config::Config;
use crate::error::{DiscoverError, Result};
use crate::kdm::PseudoLabelSet;
use crate::opt::Adam;
use crate::training::TrainState;

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;

/// Self-contained serialized training state.
pub struct Checkpoint {
    pub config: Config,
    pub meta: BTreeMap<String, u64>,
    pub arrays: BTreeMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), state.epoch as u64);
        meta.insert("class_count".into(), state.class_of_song.len() as u64);
        meta.insert("opt_main.t".into(), state.opt_main.t);
        meta.insert("opt_aux.t".into(), state.opt_aux.t);

        let mut arrays: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        let mut put_all = |list: Vec<(String, &Array2<f64>)>| {
            for (name, arr) in list {
                arrays.insert(name, arr.clone());
            }
        };
        put_all(state.encoder.named_arrays());
        put_all(state.classifier.named_arrays());
        put_all(state.gate.named_arrays());
        put_all(state.est_o.density_named_arrays());
        put_all(state.est_o.trunk_named_arrays());
        put_all(state.est_t.density_named_arrays());
        put_all(state.est_t.trunk_named_arrays());
        put_all(state.disc.named_arrays());
        arrays.insert("kcls.w".into(), state.knowledge_cls.w.clone());
        arrays.insert("kcls.b".into(), state.knowledge_cls.b.clone());

        // class map as parallel rows (song_id, class)
        let n = state.class_of_song.len();
        let mut class_map = Array2::zeros((2, n.max(1)));
        for (i, (song, class)) in state.class_of_song.iter().enumerate() {
            class_map[(0, i)] = *song as f64;
            class_map[(1, i)] = *class as f64;
        }
        arrays.insert("class_map".into(), class_map);

        if let Some(pseudo) = &state.pseudo {
            meta.insert("pseudo.clusters".into(), pseudo.n_clusters as u64);
            let m = pseudo.labels.len();
            let mut label_map = Array2::zeros((2, m.max(1)));
            for (i, (id, label)) in pseudo.labels.iter().enumerate() {
                label_map[(0, i)] = *id as f64;
                label_map[(1, i)] = *label as f64;
            }
            arrays.insert("pseudo.labels".into(), label_map);
            let d = pseudo.centroids.first().map(|c| c.len()).unwrap_or(1);
            let mut centroids = Array2::zeros((pseudo.centroids.len().max(1), d));
            for (i, c) in pseudo.centroids.iter().enumerate() {
                for (j, v) in c.iter().enumerate() {
                    centroids[(i, j)] = *v;
                }
            }
            arrays.insert("pseudo.centroids".into(), centroids);
        }

        for (prefix, opt) in [("opt_main", &state.opt_main), ("opt_aux", &state.opt_aux)] {
            for (name, (m, v)) in &opt.moments {
                arrays.insert(format!("{prefix}.m.{name}"), m.clone());
                arrays.insert(format!("{prefix}.v.{name}"), v.clone());
            }
        }

        Checkpoint {
            config: state.config.clone(),
            meta,
            arrays,
        }
    }

    /// Rebuild a training state. The configuration stored in the checkpoint
    /// fully determines every shape.
    pub fn into_state(self) -> Result<TrainState> {
        let config = self.config.clone();
        let class_map = self
            .arrays
            .get("class_map")
            .ok_or_else(|| DiscoverError::Format("checkpoint missing class_map".into()))?;
        let class_count = *self
            .meta
            .get("class_count")
            .ok_or_else(|| DiscoverError::Format("checkpoint missing class_count".into()))?
            as usize;
        let mut class_of_song = BTreeMap::new();
        for i in 0..class_count {
            class_of_song.insert(class_map[(0, i)] as u32, class_map[(1, i)] as usize);
        }

        // skeleton with the right shapes; arrays are overwritten below
        let mut state = TrainState {
            config: config.clone(),
            encoder: crate::encoder::EncoderParams::new(
                config.data.feature_dim,
                config.encoder.hidden,
                config.encoder.dim,
                0,
            ),
            classifier: crate::encoder::ClassifierParams::new(config.encoder.dim, class_count, 0),
            gate: crate::kdm::GateParams::new(config.encoder.dim, 0),
            est_o: crate::kdm::VariationalEstimator::new(
                "o",
                config.encoder.dim,
                config.kdm.knowledge_dim,
                config.kdm.estimator_hidden,
                0,
            ),
            est_t: crate::kdm::VariationalEstimator::new(
                "t",
                config.encoder.dim,
                config.data.timbre_dim,
                config.kdm.estimator_hidden,
                0,
            ),
            knowledge_cls: {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
                crate::encoder::LinearParams::new(config.encoder.dim, config.kdm.clusters, &mut rng)
            },
            disc: crate::gadm::init_discriminator(config.encoder.dim, config.gadm.disc_hidden, 0),
            opt_main: Adam::new(config.train.lr, config.train.weight_decay),
            opt_aux: Adam::new(config.train.lr, config.train.weight_decay),
            epoch: *self.meta.get("epoch").unwrap_or(&0) as usize,
            class_of_song,
            pseudo: None,
        };

        let fill = |target: &mut Array2<f64>, name: &str, arrays: &BTreeMap<String, Array2<f64>>| -> Result<()> {
            let src = arrays.get(name).ok_or_else(|| {
                DiscoverError::Format(format!("checkpoint missing array {name}"))
            })?;
            if src.dim() != target.dim() {
                return Err(DiscoverError::Format(format!(
                    "checkpoint array {name} has shape {:?}, expected {:?}",
                    src.dim(),
                    target.dim()
                )));
            }
            target.assign(src);
            Ok(())
        };

        macro_rules! load_group {
            ($list:expr) => {
                for (name, param) in $list {
                    fill(param, &name, &self.arrays)?;
                }
            };
        }
        load_group!(state.encoder.named_arrays_mut());
        load_group!(state.classifier.named_arrays_mut());
        load_group!(state.gate.named_arrays_mut());
        load_group!(state.est_o.density_named_arrays_mut());
        load_group!(state.est_o.trunk_named_arrays_mut());
        load_group!(state.est_t.density_named_arrays_mut());
        load_group!(state.est_t.trunk_named_arrays_mut());
        load_group!(state.disc.named_arrays_mut());
        fill(&mut state.knowledge_cls.w, "kcls.w", &self.arrays)?;
        fill(&mut state.knowledge_cls.b, "kcls.b", &self.arrays)?;

        if let Some(clusters) = self.meta.get("pseudo.clusters") {
            let label_map = self
                .arrays
                .get("pseudo.labels")
                .ok_or_else(|| DiscoverError::Format("checkpoint missing pseudo.labels".into()))?;
            let centroids_arr = self.arrays.get("pseudo.centroids").ok_or_else(|| {
                DiscoverError::Format("checkpoint missing pseudo.centroids".into())
            })?;
            let mut labels = BTreeMap::new();
            for i in 0..label_map.ncols() {
                labels.insert(label_map[(0, i)] as u32, label_map[(1, i)] as usize);
            }
            let centroids = centroids_arr
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect();
            state.pseudo = Some(PseudoLabelSet {
                labels,
                centroids,
                n_clusters: *clusters as usize,
            });
        }

        state.opt_main.t = *self.meta.get("opt_main.t").unwrap_or(&0);
        state.opt_aux.t = *self.meta.get("opt_aux.t").unwrap_or(&0);
        for (prefix, opt) in [
            ("opt_main", &mut state.opt_main),
            ("opt_aux", &mut state.opt_aux),
        ] {
            let m_prefix = format!("{prefix}.m.");
            for (name, arr) in &self.arrays {
                if let Some(param_name) = name.strip_prefix(&m_prefix) {
                    let v_name = format!("{prefix}.v.{param_name}");
                    let v = self.arrays.get(&v_name).ok_or_else(|| {
                        DiscoverError::Format(format!("checkpoint missing {v_name}"))
                    })?;
                    opt.moments
                        .insert(param_name.to_string(), (arr.clone(), v.clone()));
                }
            }
        }
        Ok(state)
    }
}

/// Serialize a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let mut config_text = String::new();
    for (k, v) in ckpt.config.snapshot() {
        config_text.push_str(&format!("{k} = {v}\n"));
    }
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());

    out.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    for (name, value) in &ckpt.meta {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&value.to_le_bytes());
    }

    out.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, arr) in &ckpt.arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(arr.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(arr.ncols() as u32).to_le_bytes());
        for v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse a checkpoint from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DiscoverError::Format("not a checkpoint file".into()));
    }
    let mut u32buf = [0u8; 4];
    cursor.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(DiscoverError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }

    cursor.read_exact(&mut u32buf)?;
    let config_len = u32::from_le_bytes(u32buf) as usize;
    let mut config_bytes = vec![0u8; config_len];
    cursor.read_exact(&mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| DiscoverError::Format("checkpoint config is not UTF-8".into()))?;
    let config = Config::from_str_contents(&config_text)?;

    let read_name = |cursor: &mut std::io::Cursor<&[u8]>| -> Result<String> {
        let mut u32buf = [0u8; 4];
        cursor.read_exact(&mut u32buf)?;
        let len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; len];
        cursor.read_exact(&mut name)?;
        String::from_utf8(name)
            .map_err(|_| DiscoverError::Format("checkpoint name is not UTF-8".into()))
    };

    cursor.read_exact(&mut u32buf)?;
    let n_meta = u32::from_le_bytes(u32buf);
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let name = read_name(&mut cursor)?;
        let mut u64buf = [0u8; 8];
        cursor.read_exact(&mut u64buf)?;
        meta.insert(name, u64::from_le_bytes(u64buf));
    }

    cursor.read_exact(&mut u32buf)?;
    let n_arrays = u32::from_le_bytes(u32buf);
    let mut arrays = BTreeMap::new();
    for _ in 0..n_arrays {
        let name = read_name(&mut cursor)?;
        cursor.read_exact(&mut u32buf)?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        cursor.read_exact(&mut u32buf)?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut data = vec![0u8; rows * cols * 8];
        cursor.read_exact(&mut data)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.insert(
            name,
            Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| DiscoverError::Format(format!("bad array shape: {e}")))?,
        );
    }

    Ok(Checkpoint {
        config,
        meta,
        arrays,
    })
}

/// Save a training state to a checkpoint file.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(&Checkpoint::from_state(state));
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Load a training state from a checkpoint file.
pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| {
        DiscoverError::Format(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    from_bytes(&bytes)?.into_state()
}
