use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::{BatchRecord, TrainConfig, TrainError};
use crate::dataio::{EmbeddingTable, ModelCheckpoint, MoleculePool, TrainingMeta, CHECKPOINT_VERSION};
use crate::diffcore::Tape;
use crate::encoder::{forward, init_params, EncoderConfig, EncoderParams, GraphBatch, ParamVars};
use crate::fingerprint::{ecfp_batch, Fingerprint};
use crate::loss::{bilevel_loss, graph_loss, latent_matrix, node_loss};
use crate::molgraph::{elements, FeaturizedGraph};
use crate::similarity::{
    cosine_self_similarity, fingerprint_self_similarity, fuse_available, fuse_weighted, node_target_matrix,
    pair_weight_with, Modality, PartialTarget, PeakTable, TargetSimilarityMatrix,
};

/// Everything the loop reads: the molecules plus optional modality inputs.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub ids: Vec<String>,
    pub graphs: Vec<FeaturizedGraph>,
    carbons: Vec<Vec<bool>>,
    molecular: Vec<crate::molgraph::MolecularGraph>,
    /// Indexed by `Modality::tag` for smiles, nmr, image.
    embeddings: [Option<EmbeddingTable>; 3],
    peaks: Option<PeakTable>,
}

impl TrainingData {
    pub fn new(pool: &MoleculePool) -> Self {
        TrainingData {
            ids: pool.ids(),
            graphs: pool.molecules.iter().map(|m| m.features.clone()).collect(),
            carbons: pool
                .molecules
                .iter()
                .map(|m| m.graph.atoms().iter().map(|a| a.element == elements::CARBON).collect())
                .collect(),
            molecular: pool.molecules.iter().map(|m| m.graph.clone()).collect(),
            embeddings: [None, None, None],
            peaks: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_embeddings(mut self, table: EmbeddingTable) -> Result<Self, TrainError> {
        let slot = match table.modality() {
            Modality::Smiles | Modality::Nmr | Modality::Image => table.modality().tag() as usize,
            m => return Err(TrainError::Config(format!("{m} is not an embedding modality"))),
        };
        self.embeddings[slot] = Some(table);
        Ok(self)
    }

    /// Peaks must reference carbon atoms of pool molecules.
    pub fn with_peaks(mut self, peaks: PeakTable) -> Result<Self, TrainError> {
        for (id, list) in &peaks.peaks {
            let k = self
                .ids
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| TrainError::Config(format!("peaks for unknown molecule {id:?}")))?;
            if let Some(p) = list.iter().find(|p| !self.carbons[k].get(p.atom).copied().unwrap_or(false)) {
                return Err(TrainError::Config(format!("peak on non-carbon atom {} of {id:?}", p.atom)));
            }
        }
        self.peaks = Some(peaks);
        Ok(self)
    }

    pub fn embeddings(&self, modality: Modality) -> Option<&EmbeddingTable> {
        match modality {
            Modality::Smiles | Modality::Nmr | Modality::Image => self.embeddings[modality.tag() as usize].as_ref(),
            _ => None,
        }
    }

    pub fn peaks(&self) -> Option<&PeakTable> {
        self.peaks.as_ref()
    }

    /// Fails fast when a weighted modality lacks a vector for some molecule,
    /// unless the config allows renormalization.
    fn check_modalities(&self, cfg: &TrainConfig) -> Result<(), TrainError> {
        if cfg.level.uses_graph() && !cfg.permissive_missing {
            for m in cfg.fusion.active() {
                if m == Modality::Fingerprint {
                    continue;
                }
                let table = self
                    .embeddings(m)
                    .ok_or_else(|| TrainError::MissingModality(format!("no {m} embeddings supplied")))?;
                if let Some(id) = self.ids.iter().find(|id| table.get(id).is_none()) {
                    return Err(TrainError::MissingModality(format!("{m} embedding for {id:?}")));
                }
            }
        }
        if cfg.level.uses_node() && self.peaks.is_none() {
            return Err(TrainError::MissingModality("node level needs a peak table".into()));
        }
        Ok(())
    }
}

/// Fused graph-level target for the pool positions `members`.
pub fn graph_target(
    data: &TrainingData,
    fingerprints: &[Fingerprint],
    members: &[usize],
    cfg: &TrainConfig,
) -> Result<TargetSimilarityMatrix, TrainError> {
    let ids: Vec<String> = members.iter().map(|&k| data.ids[k].clone()).collect();
    // (weight, positions within `members`, target)
    let mut parts: Vec<(f64, Vec<usize>, TargetSimilarityMatrix)> = Vec::new();
    for m in cfg.fusion.active() {
        let w = cfg.fusion.weight(m);
        let (local, s) = if m == Modality::Fingerprint {
            let fps: Vec<&Fingerprint> = members.iter().map(|&k| &fingerprints[k]).collect();
            ((0..members.len()).collect::<Vec<_>>(), fingerprint_self_similarity(&fps, ids.clone())?)
        } else {
            let Some(table) = data.embeddings(m) else {
                if cfg.permissive_missing {
                    continue;
                }
                return Err(TrainError::MissingModality(format!("no {m} embeddings supplied")));
            };
            let mut local = Vec::new();
            let mut vecs = Vec::new();
            for (a, id) in ids.iter().enumerate() {
                match table.get(id) {
                    Some(v) => {
                        local.push(a);
                        vecs.push(v);
                    }
                    None if cfg.permissive_missing => {}
                    None => return Err(TrainError::MissingModality(format!("{m} embedding for {id:?}"))),
                }
            }
            if local.is_empty() {
                continue;
            }
            let sub_ids = local.iter().map(|&a| ids[a].clone()).collect();
            (local, cosine_self_similarity(&vecs, sub_ids, m)?)
        };
        parts.push((w, local, pair_weight_with(&s, cfg.self_pair)?));
    }
    let complete = parts.iter().all(|(_, local, _)| local.len() == members.len());
    let weight_total: f64 = parts.iter().map(|(w, _, _)| w).sum();
    if complete && (weight_total - 1.0).abs() <= crate::similarity::WEIGHT_SUM_TOLERANCE {
        let mats: Vec<&TargetSimilarityMatrix> = parts.iter().map(|(_, _, t)| t).collect();
        let ws: Vec<f64> = parts.iter().map(|(w, _, _)| *w).collect();
        return Ok(fuse_weighted(&mats, &ws)?);
    }
    let partials: Vec<PartialTarget<'_>> = parts
        .iter()
        .map(|(w, local, t)| PartialTarget { weight: *w, members: local, target: t })
        .collect();
    Ok(fuse_available(ids, &partials)?)
}

/// Seeded optimizer loop; resumable at epoch boundaries.
pub struct Trainer<'a> {
    data: &'a TrainingData,
    fingerprints: Vec<Fingerprint>,
    pub encoder: EncoderConfig,
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u32,
    pub history: Vec<BatchRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainingData, encoder: EncoderConfig, config: TrainConfig) -> Result<Self, TrainError> {
        let params = init_params(&encoder)?;
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
        Self::assemble(data, encoder, config, params, AdamState::new(&sizes), 0, Vec::new())
    }

    pub fn from_checkpoint(data: &'a TrainingData, ckpt: &ModelCheckpoint) -> Result<Self, TrainError> {
        Self::assemble(
            data,
            ckpt.encoder,
            ckpt.train,
            ckpt.params.clone(),
            ckpt.adam.clone(),
            ckpt.meta.epoch,
            ckpt.meta.history.clone(),
        )
    }

    fn assemble(
        data: &'a TrainingData,
        encoder: EncoderConfig,
        config: TrainConfig,
        params: EncoderParams,
        adam: AdamState,
        epoch: u32,
        history: Vec<BatchRecord>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        params.check(&encoder)?;
        if data.len() < 2 {
            return Err(TrainError::Config(format!("need at least 2 molecules, got {}", data.len())));
        }
        data.check_modalities(&config)?;
        for (k, (m, p)) in adam.m.iter().zip(params.tensors()).enumerate() {
            if m.len() != p.numel() || adam.v[k].len() != p.numel() {
                return Err(TrainError::Shape(format!("optimizer buffer {k} does not match its parameter")));
            }
        }
        let fingerprints = ecfp_batch(&data.molecular, config.fingerprint);
        Ok(Trainer { data, fingerprints, encoder, config, params, adam, epoch, history })
    }

    pub fn fingerprints(&self) -> &[Fingerprint] {
        &self.fingerprints
    }

    /// Shuffled batches for `epoch`. The order depends only on the seed
    /// and the epoch number; a trailing single molecule is dropped.
    pub fn batches(&self, epoch: u32) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Runs the next epoch and returns its mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64, TrainError> {
        let epoch = self.epoch;
        let batches = self.batches(epoch);
        let mut total = 0.0;
        for (b, members) in batches.iter().enumerate() {
            let rec = self.step(epoch, b as u32, members)?;
            total += rec.loss;
            self.history.push(rec);
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    /// One forward/backward/update on the given pool positions.
    pub fn step(&mut self, epoch: u32, batch: u32, members: &[usize]) -> Result<BatchRecord, TrainError> {
        let cfg = self.config;
        let graphs: Vec<&FeaturizedGraph> = members.iter().map(|&k| &self.data.graphs[k]).collect();
        let gb = GraphBatch::new(&graphs)?;
        let mut tape = Tape::new();
        let vars = ParamVars::trainable(&mut tape, &self.params);
        let enc = forward(&mut tape, vars, &gb, &self.encoder)?;

        let graph_term = if cfg.level.uses_graph() {
            let target = graph_target(self.data, &self.fingerprints, members, &cfg)?;
            let d = latent_matrix(&mut tape, enc.graphs, &cfg.latent)?;
            Some(graph_loss(&mut tape, &target, d)?)
        } else {
            None
        };
        let node_term = if cfg.level.uses_node() {
            let peaks = self.data.peaks.as_ref().expect("checked at construction");
            let mut rows = Vec::new();
            let mut ppms = Vec::new();
            let mut ids = Vec::new();
            let mut offset = 0;
            for &k in members {
                for p in peaks.get(&self.data.ids[k]) {
                    rows.push(offset + p.atom);
                    ppms.push(p.ppm);
                    ids.push(format!("{}:{}", self.data.ids[k], p.atom));
                }
                offset += self.data.graphs[k].n_atoms();
            }
            if rows.is_empty() {
                return Err(TrainError::EmptyNodePool { epoch, batch });
            }
            let target = node_target_matrix(&ppms, ids, cfg.tau1, cfg.tau2)?;
            let sel = tape.select_rows(enc.nodes, &rows).map_err(crate::loss::LossError::from)?;
            let d = latent_matrix(&mut tape, sel, &cfg.latent)?;
            Some(node_loss(&mut tape, &target, d)?)
        } else {
            None
        };
        let loss = match (graph_term, node_term) {
            (Some(g), Some(n)) => bilevel_loss(&mut tape, g, n)?,
            (Some(g), None) => g,
            (None, Some(n)) => n,
            (None, None) => unreachable!("every level uses a pool"),
        };
        tape.backward(loss).map_err(crate::loss::LossError::from)?;
        let loss_value = tape.value(loss).data()[0];

        let grads: Vec<Vec<f64>> = vars
            .vars()
            .iter()
            .map(|&v| tape.grad(v).expect("trainable").data().to_vec())
            .collect();
        let grad_norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let [w_in, w_msg, w_node] = self.params.tensors_mut();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam_step(
            &mut [w_in.data_mut(), w_msg.data_mut(), w_node.data_mut()],
            &grad_refs,
            &mut self.adam,
            cfg.learning_rate,
        )?;
        Ok(BatchRecord { epoch, batch, loss: loss_value, grad_norm })
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format_version: CHECKPOINT_VERSION,
            encoder: self.encoder,
            train: self.config,
            params: self.params.clone(),
            adam: self.adam.clone(),
            meta: TrainingMeta { epoch: self.epoch, history: self.history.clone() },
        }
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(&mut self) -> Result<(), TrainError> {
        while self.epoch < self.config.epochs {
            let mean = self.run_epoch()?;
            log::info!("epoch {} mean loss {mean:.6}", self.epoch);
        }
        Ok(())
    }
}

/// Full pre-training run from fresh parameters.
pub fn pretrain(data: &TrainingData, encoder: EncoderConfig, config: TrainConfig) -> Result<ModelCheckpoint, TrainError> {
    let mut t = Trainer::new(data, encoder, config)?;
    t.run()?;
    Ok(t.checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Readout;
    use crate::molgraph::ParseOptions;
    use crate::similarity::{FusionWeights, Peak};

    fn pool(smiles: &[&str]) -> MoleculePool {
        let ids: Vec<String> = (0..smiles.len()).map(|i| format!("m{i}")).collect();
        MoleculePool::from_smiles(ids.iter().map(String::as_str).zip(smiles.iter().copied()), ParseOptions::default())
            .unwrap()
    }

    fn enc() -> EncoderConfig {
        EncoderConfig { hidden_dim: 8, depth: 2, readout: Readout::Mean, seed: 3 }
    }

    fn cfg(epochs: u32, batch: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: batch, learning_rate: 0.01, seed: 5, ..Default::default() }
    }

    const EIGHT: [&str; 8] = ["CCO", "CCN", "c1ccccc1", "CC(=O)O", "CCCCCC", "c1ccncc1", "OCC(O)CO", "ClCCl"];

    #[test]
    fn eight_molecules_loss_decreases() {
        let data = TrainingData::new(&pool(&EIGHT));
        let mut t = Trainer::new(&data, enc(), cfg(50, 8)).unwrap();
        let first = t.run_epoch().unwrap();
        t.run().unwrap();
        let last = t.history.last().unwrap().loss;
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn identical_molecules_give_uniform_target() {
        let data = TrainingData::new(&pool(&["CCO", "CCO", "CCO", "CCO"]));
        let t = Trainer::new(&data, enc(), cfg(1, 4)).unwrap();
        let target = graph_target(&data, t.fingerprints(), &[0, 1, 2, 3], &t.config).unwrap();
        assert!(target.values().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identical_molecules_start_at_log_pool_size() {
        let data = TrainingData::new(&pool(&["CCO", "CCO", "CCO"]));
        let mut t = Trainer::new(&data, enc(), cfg(1, 3)).unwrap();
        let r = t.step(0, 0, &[0, 1, 2]).unwrap();
        assert!((r.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = TrainingData::new(&pool(&EIGHT));
        let a = pretrain(&data, enc(), cfg(3, 3)).unwrap();
        let b = pretrain(&data, enc(), cfg(3, 3)).unwrap();
        assert_eq!(a, b);
        // 8 molecules in batches of 3: 3 + 3 + 2 per epoch.
        assert_eq!(a.meta.history.len(), 9);
    }

    #[test]
    fn resume_matches_straight_run() {
        let data = TrainingData::new(&pool(&EIGHT));
        let straight = pretrain(&data, enc(), cfg(4, 4)).unwrap();
        let mut first = Trainer::new(&data, enc(), cfg(4, 4)).unwrap();
        first.run_epoch().unwrap();
        first.run_epoch().unwrap();
        let mut resumed = Trainer::from_checkpoint(&data, &first.checkpoint()).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.checkpoint(), straight);
    }

    #[test]
    fn full_batch_is_one_chunk() {
        let data = TrainingData::new(&pool(&EIGHT));
        let t = Trainer::new(&data, enc(), cfg(1, 100)).unwrap();
        let b = t.batches(0);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 8);
    }

    #[test]
    fn missing_modality_fails_fast() {
        let data = TrainingData::new(&pool(&EIGHT));
        let c = TrainConfig { fusion: FusionWeights::preset("fusion-average").unwrap(), ..cfg(1, 8) };
        assert!(matches!(Trainer::new(&data, enc(), c), Err(TrainError::MissingModality(_))));
        let permissive = TrainConfig { permissive_missing: true, ..c };
        let mut t = Trainer::new(&data, enc(), permissive).unwrap();
        t.run_epoch().unwrap();
    }

    #[test]
    fn permissive_partial_embeddings() {
        let data = TrainingData::new(&pool(&EIGHT));
        let table = EmbeddingTable::new(
            Modality::Smiles,
            vec![("m0".into(), vec![1.0, 0.0]), ("m1".into(), vec![0.5, 0.5]), ("m2".into(), vec![0.0, 1.0])],
        )
        .unwrap();
        let data = data.with_embeddings(table).unwrap();
        let c = TrainConfig {
            fusion: FusionWeights::new(0.5, 0.0, 0.0, 0.5).unwrap(),
            permissive_missing: true,
            ..cfg(1, 8)
        };
        let t = Trainer::new(&data, enc(), c).unwrap();
        let target = graph_target(&data, t.fingerprints(), &(0..8).collect::<Vec<_>>(), &c).unwrap();
        assert!(target.max_row_sum_error() < 1e-12);
    }

    #[test]
    fn node_level_needs_annotated_carbons() {
        let mut peaks = PeakTable::default();
        peaks.peaks.insert("m0".into(), vec![Peak { atom: 0, ppm: 18.0 }, Peak { atom: 1, ppm: 58.0 }]);
        peaks.peaks.insert("m4".into(), vec![Peak { atom: 0, ppm: 14.0 }, Peak { atom: 2, ppm: 31.0 }]);
        let data = TrainingData::new(&pool(&EIGHT)).with_peaks(peaks).unwrap();
        let c = TrainConfig { level: super::super::Level::Bilevel, ..cfg(1, 8) };
        let mut t = Trainer::new(&data, enc(), c).unwrap();
        t.run_epoch().unwrap();
        let mut t = Trainer::new(&data, enc(), TrainConfig { level: super::super::Level::Node, ..c }).unwrap();
        assert!(matches!(t.step(0, 0, &[1, 2]), Err(TrainError::EmptyNodePool { .. })));
    }

    #[test]
    fn peaks_on_non_carbon_rejected() {
        let mut peaks = PeakTable::default();
        peaks.peaks.insert("m0".into(), vec![Peak { atom: 2, ppm: 1.0 }]);
        assert!(TrainingData::new(&pool(&EIGHT)).with_peaks(peaks).is_err());
    }
}
