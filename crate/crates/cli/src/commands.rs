use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use graphmsl::dataio::{
    load_checkpoint, load_embeddings, load_molecules, load_peaks, loss_history_csv, save_checkpoint, write_atomic,
    MoleculePool,
};
use graphmsl::encoder::{embed_all, EncoderConfig, Readout};
use graphmsl::evalkit::{linear_probe, retrieval_check, Split, Task};
use graphmsl::fingerprint::{ecfp_batch, read_cache, write_cache, Fingerprint, FingerprintParams};
use graphmsl::loss::{LatentMode, LatentSimilarityConfig};
use graphmsl::molgraph::ParseOptions;
use graphmsl::similarity::{
    cosine_self_similarity, fingerprint_self_similarity, fuse, pair_weight_with, read_matrix_bin, read_matrix_csv,
    write_matrix_bin, write_matrix_csv, FusionWeights, Modality, SelfPair, SelfSimilarityMatrix, SquareMatrix,
    TargetSimilarityMatrix,
};
use graphmsl::trainer::{epoch_means, verify_theorem, Level, TheoremOptions, TrainConfig, TrainError, Trainer, TrainingData};
use serde_json::json;

use crate::error::CliError;
use crate::{
    CliLatent, CliLevel, CliModality, CliReadout, CliTask, Command, EmbedArgs, FingerprintArgs, Format, FuseArgs,
    ParseArgs, PretrainArgs, ProbeArgs, RetrievalArgs, SimmatrixArgs, VerifyArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Parse(a) => parse(a),
        Command::Fingerprint(a) => fingerprint(a),
        Command::Simmatrix(a) => simmatrix(a),
        Command::Fuse(a) => fuse_cmd(a),
        Command::Pretrain(a) => pretrain(a),
        Command::VerifyTheorem(a) => verify(a),
        Command::Embed(a) => embed(a),
        Command::Probe(a) => probe(a),
        Command::RetrievalCheck(a) => retrieval(a),
    }
}

/// Writes to `out` atomically, or to stdout when no path is given.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(bytes)
}

fn with_path<E: Into<CliError>>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| match e.into() {
        CliError::Data(m) if !m.starts_with(&path.display().to_string()) => {
            CliError::Data(format!("{}: {m}", path.display()))
        }
        other => other,
    }
}

fn molecules(path: &Path) -> Result<MoleculePool> {
    load_molecules(path, ParseOptions::default()).map_err(with_path(path))
}

fn modality(m: CliModality) -> Modality {
    match m {
        CliModality::Smiles => Modality::Smiles,
        CliModality::Nmr => Modality::Nmr,
        CliModality::Image => Modality::Image,
        CliModality::Fingerprint => Modality::Fingerprint,
    }
}

fn fusion_weights(weights: &Option<Vec<f64>>, preset: Option<&str>) -> Result<FusionWeights> {
    match (weights, preset) {
        (Some(w), _) => {
            let arr: [f64; 4] = w
                .as_slice()
                .try_into()
                .map_err(|_| CliError::Usage(format!("--weights needs 4 values, got {}", w.len())))?;
            Ok(FusionWeights::from_array(arr)?)
        }
        (None, Some(name)) => Ok(FusionWeights::preset(name)?),
        (None, None) => Err(CliError::Usage("one of --weights or --fusion-preset is required".into())),
    }
}

fn parse(a: &ParseArgs) -> Result<()> {
    let opts = ParseOptions { strict_valence: a.strict_valence, keep_largest_fragment: a.largest_fragment };
    let pool = load_molecules(&a.input, opts).map_err(with_path(&a.input))?;
    if a.stats {
        let mut out = String::new();
        for m in &pool.molecules {
            let rec = json!({ "id": m.id, "atoms": m.graph.heavy_atom_count(), "bonds": m.graph.bonds().len() });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        emit(None, &out)?;
    }
    log::info!("parsed {} molecules", pool.len());
    Ok(())
}

fn fingerprint(a: &FingerprintArgs) -> Result<()> {
    let params = FingerprintParams::new(a.radius, a.bits as usize)?;
    let pool = molecules(&a.input)?;
    let graphs: Vec<_> = pool.molecules.iter().map(|m| m.graph.clone()).collect();
    let records: Vec<(String, Fingerprint)> = pool.ids().into_iter().zip(ecfp_batch(&graphs, params)).collect();
    let mut buf = Vec::new();
    write_cache(&mut buf, params, &records)?;
    write_atomic(&a.out, &buf)?;
    log::info!("wrote {} fingerprints to {}", records.len(), a.out.display());
    Ok(())
}

fn write_matrix(out: &Path, m: &SquareMatrix, format: Format, tag: Modality) -> Result<()> {
    let mut buf = Vec::new();
    match format {
        Format::Csv => write_matrix_csv(&mut buf, m)?,
        Format::Bin => write_matrix_bin(&mut buf, m, tag)?,
    }
    Ok(write_atomic(out, &buf)?)
}

fn simmatrix(a: &SimmatrixArgs) -> Result<()> {
    let m = modality(a.modality);
    let s = if m == Modality::Fingerprint {
        let path = a
            .fingerprints
            .as_deref()
            .ok_or_else(|| CliError::Usage("--fingerprints is required for the fingerprint modality".into()))?;
        let (_, records) = read_cache(read_file(path)?.as_slice()).map_err(with_path(path))?;
        let ids = records.iter().map(|(id, _)| id.clone()).collect();
        let fps: Vec<&Fingerprint> = records.iter().map(|(_, f)| f).collect();
        fingerprint_self_similarity(&fps, ids).map_err(with_path(path))?
    } else {
        let path = a
            .embeddings
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("--embeddings is required for the {m} modality")))?;
        let table = load_embeddings(path, m)?;
        let vectors: Vec<&[f64]> = table.iter().map(|(_, v)| v).collect();
        cosine_self_similarity(&vectors, table.ids().to_vec(), m).map_err(with_path(path))?
    };
    write_matrix(&a.out, &s.matrix, a.format, m)?;
    log::info!("wrote {n}x{n} {m} self-similarity to {}", a.out.display(), n = s.n());
    Ok(())
}

fn read_matrix(path: &Path) -> Result<(SquareMatrix, Option<Modality>)> {
    let bytes = read_file(path)?;
    if bytes.starts_with(b"GMSM") {
        let (m, tag) = read_matrix_bin(bytes.as_slice()).map_err(with_path(path))?;
        Ok((m, Some(tag)))
    } else {
        Ok((read_matrix_csv(bytes.as_slice()).map_err(with_path(path))?, None))
    }
}

fn fuse_cmd(a: &FuseArgs) -> Result<()> {
    let weights = fusion_weights(&a.weights, a.fusion_preset.as_deref())?;
    let self_pair = if a.exclude_self_pair { SelfPair::Exclude } else { SelfPair::Include };
    let mut slots: [Option<TargetSimilarityMatrix>; 4] = Default::default();
    for (pos, path) in a.inputs.iter().enumerate() {
        let (matrix, tag) = read_matrix(path)?;
        let m = match tag {
            Some(t) if Modality::GRAPH_LEVEL.contains(&t) => t,
            Some(t) => return Err(CliError::Data(format!("{}: {t} matrix cannot be fused", path.display()))),
            None => *Modality::GRAPH_LEVEL
                .get(pos)
                .ok_or_else(|| CliError::Usage("at most 4 CSV inputs (smiles, nmr, image, fingerprint)".into()))?,
        };
        let slot = m.tag() as usize;
        if slots[slot].is_some() {
            return Err(CliError::Usage(format!("two inputs for the {m} modality")));
        }
        let s = SelfSimilarityMatrix { matrix, modality: m };
        slots[slot] = Some(pair_weight_with(&s, self_pair).map_err(with_path(path))?);
    }
    let inputs: Vec<(Modality, &TargetSimilarityMatrix)> = Modality::GRAPH_LEVEL
        .iter()
        .zip(&slots)
        .filter_map(|(m, t)| t.as_ref().map(|t| (*m, t)))
        .collect();
    let fused = fuse(&inputs, &weights)?;
    write_matrix(&a.out, &fused.matrix, a.format, Modality::Fused)?;
    log::info!("fused {} matrices into {}", inputs.len(), a.out.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let pool = molecules(&a.mols)?;
    let mut data = TrainingData::new(&pool);
    for (path, m) in [
        (&a.embeddings_smiles, Modality::Smiles),
        (&a.embeddings_nmr, Modality::Nmr),
        (&a.embeddings_image, Modality::Image),
    ] {
        if let Some(p) = path {
            data = data.with_embeddings(load_embeddings(p, m)?)?;
        }
    }
    if let Some(p) = &a.peaks {
        let (peaks, _warnings) = load_peaks(p, Some(&pool))?;
        data = data.with_peaks(peaks)?;
    }
    let mut trainer = if let Some(resume) = &a.resume {
        let ckpt = load_checkpoint(resume)?;
        let mut t = Trainer::from_checkpoint(&data, &ckpt)?;
        t.config.epochs = a.epochs;
        t
    } else {
        let encoder = EncoderConfig {
            hidden_dim: a.hidden,
            depth: a.depth,
            readout: match a.readout {
                CliReadout::Mean => Readout::Mean,
                CliReadout::Sum => Readout::Sum,
            },
            seed: a.seed,
        };
        let config = TrainConfig {
            learning_rate: a.lr,
            epochs: a.epochs,
            batch_size: a.batch as usize,
            level: match a.level {
                CliLevel::Graph => Level::Graph,
                CliLevel::Node => Level::Node,
                CliLevel::Bilevel => Level::Bilevel,
            },
            fusion: fusion_weights(&a.weights, Some(&a.fusion_preset))?,
            seed: a.seed,
            latent: LatentSimilarityConfig {
                mode: match a.latent {
                    CliLatent::Dot => LatentMode::Dot,
                    CliLatent::Cosine => LatentMode::ScaledCosine,
                },
                temperature: a.latent_temp,
            },
            tau1: a.tau1,
            tau2: a.tau2,
            self_pair: if a.exclude_self_pair { SelfPair::Exclude } else { SelfPair::Include },
            permissive_missing: a.permissive_missing,
            fingerprint: FingerprintParams::new(a.radius, a.bits as usize)?,
        };
        Trainer::new(&data, encoder, config)?
    };
    log::info!(
        "training config: {}",
        json!({ "encoder": trainer.encoder, "train": trainer.config, "start_epoch": trainer.epoch })
    );
    trainer.run()?;
    let ckpt = trainer.checkpoint();
    save_checkpoint(&ckpt, &a.out)?;
    if let Some(h) = &a.history {
        write_atomic(h, loss_history_csv(&ckpt.meta.history).as_bytes())?;
    }
    let means = epoch_means(&ckpt.meta.history);
    let summary = json!({
        "epochs": ckpt.meta.epoch,
        "steps": ckpt.meta.history.len(),
        "first_epoch_loss": means.first().map(|m| m.1),
        "final_epoch_loss": means.last().map(|m| m.1),
    });
    emit(None, &format!("{summary}\n"))
}

fn verify(a: &VerifyArgs) -> Result<()> {
    let opts = TheoremOptions {
        max_steps: a.max_steps,
        learning_rate: a.lr,
        grad_tol: a.grad_tol,
        ..Default::default()
    };
    if !(a.lr > 0.0) {
        return Err(CliError::Usage(format!("--lr must be positive, got {}", a.lr)));
    }
    let (report, failure) = match verify_theorem(a.n as usize, a.trials as usize, a.seed, &opts) {
        Ok(r) => (r, None),
        Err(TrainError::NonConvergence(r)) => {
            let msg = TrainError::NonConvergence(r.clone()).to_string();
            (*r, Some(CliError::Numerical(msg)))
        }
        Err(e) => return Err(e.into()),
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    emit(a.out.as_deref(), &text)?;
    if let Some(f) = failure {
        return Err(f);
    }
    if report.max_softmax_deviation >= a.tol || report.ordering_violations > 0 {
        return Err(CliError::Numerical(format!(
            "max deviation {:.3e} (tolerance {:.1e}), {} ordering violations",
            report.max_softmax_deviation, a.tol, report.ordering_violations
        )));
    }
    Ok(())
}

fn embeddings_for(ckpt_path: &Path, mols: &Path) -> Result<(graphmsl::dataio::ModelCheckpoint, MoleculePool, Vec<Vec<f64>>)> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let pool = molecules(mols)?;
    let graphs: Vec<_> = pool.molecules.iter().map(|m| m.features.clone()).collect();
    let emb = embed_all(&graphs, &ckpt.params, &ckpt.encoder)?;
    Ok((ckpt, pool, emb))
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let (_, pool, emb) = embeddings_for(&a.ckpt, &a.mols)?;
    let mut out = String::new();
    for (m, v) in pool.molecules.iter().zip(&emb) {
        out.push_str(&json!({ "id": m.id, "vector": v }).to_string());
        out.push('\n');
    }
    write_atomic(&a.out, out.as_bytes())?;
    log::info!("wrote {} embeddings to {}", emb.len(), a.out.display());
    Ok(())
}

fn probe(a: &ProbeArgs) -> Result<()> {
    let [train, val, test] = a.split[..] else {
        return Err(CliError::Usage(format!("--split needs 3 fractions, got {}", a.split.len())));
    };
    let split = Split::new(train, val, test)?;
    let (_, pool, emb) = embeddings_for(&a.ckpt, &a.mols)?;
    let (x, y): (Vec<Vec<f64>>, Vec<f64>) = pool
        .molecules
        .iter()
        .zip(emb)
        .filter_map(|(m, e)| m.labels.get(a.label_index).copied().flatten().map(|l| (e, l)))
        .unzip();
    log::info!("{} of {} molecules have label {}", y.len(), pool.len(), a.label_index);
    let task = match a.task {
        CliTask::Cls => Task::Classification,
        CliTask::Reg => Task::Regression,
    };
    let result = linear_probe(&x, &y, task, split, a.seed)?;
    emit(a.out.as_deref(), &(serde_json::to_string(&result).expect("result serializes") + "\n"))
}

fn retrieval(a: &RetrievalArgs) -> Result<()> {
    let (ckpt, pool, emb) = embeddings_for(&a.ckpt, &a.mols)?;
    let graphs: Vec<_> = pool.molecules.iter().map(|m| m.graph.clone()).collect();
    let fps = ecfp_batch(&graphs, ckpt.train.fingerprint);
    let report = retrieval_check(&emb, &fps, a.seed)?;
    emit(a.out.as_deref(), &(serde_json::to_string(&report).expect("report serializes") + "\n"))
}
