//! Round loop of the federated simulator.

use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::aggregate::Aggregator;
use crate::codec::{bitrate, decode_mask, empirical_entropy, encode_mask, CodedMask, ModelArtifact};
use crate::data::{load_idx, partition_iid, partition_noniid, synth_dataset, Dataset};
use crate::mask::{
    clamp_theta, masked_weights, sample_mask, sigmoid, train_local_scores, BinaryMask, ProbMask, ScoreMask,
};
use crate::nn::{forward, init_frozen_weights, predict, FrozenWeights, NetworkArch};
use crate::par::Exec;
use crate::privacy::{build_bias_table, correct_bias, gaussian_sigma, privatize_mask, BiasTable, DpConfig, DEFAULT_TABLE_POINTS};
use crate::rng::{derive_seed, round_client_index, stream_rng, Stream};
use crate::sim::config::{Baseline, DataSource, DistillMode, ExperimentConfig, PartitionKind};
use crate::sim::metrics::RoundMetrics;
use crate::sim::signsgd::{signsgd_round, SignClient};
use crate::{Error, Result};

/// Client shards plus the server's held-out test set.
#[derive(Debug, Clone)]
pub struct Federation {
    pub shards: Vec<Dataset>,
    pub test: Dataset,
}

/// Load or synthesize the data and split it across clients.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Federation> {
    let (train, test) = match cfg.data {
        DataSource::Synthetic => {
            let s = &cfg.synthetic;
            let all = synth_dataset(s.seed, s.train + s.test, s.dims, s.classes, s.separation)?;
            let train_idx: Vec<usize> = (0..s.train).collect();
            let test_idx: Vec<usize> = (s.train..s.train + s.test).collect();
            (all.subset(&train_idx), all.subset(&test_idx))
        }
        DataSource::Idx => {
            let dir = cfg
                .data_dir
                .as_deref()
                .ok_or_else(|| Error::Config("IDX data needs data_dir".into()))?;
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            (train, test)
        }
    };
    let mut rng = stream_rng(cfg.seed, Stream::Partition, 0);
    let shards = match cfg.partition {
        PartitionKind::Iid => partition_iid(&train, cfg.clients, &mut rng)?,
        PartitionKind::Noniid => partition_noniid(&train, cfg.clients, cfg.c_max, &mut rng)?,
    };
    Ok(Federation { shards, test })
}

/// Frozen weights and the initial broadcast `θ = sigmoid(s)`, `s ~ N(0, std²)`.
pub fn global_init(cfg: &ExperimentConfig) -> Result<(FrozenWeights, ProbMask)> {
    let arch = cfg.network()?;
    let weights = init_frozen_weights(&arch, derive_seed(cfg.seed, Stream::Weights, 0))?;
    let mut rng = stream_rng(cfg.seed, Stream::ServerInit, 0);
    let d = arch.param_count();
    let scores = if cfg.score_init_std == 0.0 {
        vec![0.0; d]
    } else {
        let normal = Normal::new(0.0, cfg.score_init_std)
            .map_err(|e| Error::Config(format!("score_init_std: {e}")))?;
        (0..d).map(|_| normal.sample(&mut rng)).collect()
    };
    Ok((weights, sigmoid(&ScoreMask::new(scores)?)))
}

/// Turn probabilities into a deployable mask: `θ_i > α_ths` or one Bernoulli draw.
pub fn distill_final(theta: &ProbMask, mode: DistillMode, alpha_ths: f64, seed: u64) -> BinaryMask {
    match mode {
        DistillMode::Threshold => {
            BinaryMask::from_bits(theta.as_slice().iter().map(|&p| p > alpha_ths).collect())
        }
        DistillMode::Sample => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            sample_mask(theta, &mut rng)
        }
    }
}

const EVAL_CHUNK: usize = 1024;

/// Top-1 accuracy of the network with the given effective weights.
pub fn accuracy(arch: &NetworkArch, effective: &[f64], test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    if test.feature_dim() != arch.input_dim() {
        return Err(Error::Shape(format!(
            "test features ({}) do not match the network input ({})",
            test.feature_dim(),
            arch.input_dim()
        )));
    }
    let mut correct = 0usize;
    let n = test.len();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let (logits, _) = forward(arch, effective, test.samples().slice(s![start..end, ..]))?;
        correct += predict(logits.view())
            .iter()
            .zip(&test.labels()[start..end])
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / n as f64)
}

pub fn evaluate_mask(arch: &NetworkArch, w: &FrozenWeights, mask: &BinaryMask, test: &Dataset) -> Result<f64> {
    accuracy(arch, &masked_weights(mask, w)?, test)
}

/// Accuracy of `f_{m ⊙ w}` where `m` is distilled from `theta`.
pub fn evaluate(
    arch: &NetworkArch,
    w: &FrozenWeights,
    theta: &ProbMask,
    mode: DistillMode,
    alpha_ths: f64,
    seed: u64,
    test: &Dataset,
) -> Result<f64> {
    evaluate_mask(arch, w, &distill_final(theta, mode, alpha_ths, seed), test)
}

/// Rebuild the sparse network from an artifact and score it.
pub fn evaluate_artifact(artifact: &ModelArtifact, test: &Dataset) -> Result<f64> {
    let mask = artifact.decode_mask()?;
    let w = init_frozen_weights(&artifact.arch, artifact.seed)?;
    evaluate_mask(&artifact.arch, &w, &mask, test)
}

pub fn theta_digest(theta: &ProbMask) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in theta.as_slice() {
        h.update(p.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub metrics: Vec<RoundMetrics>,
    /// Accuracy of the initial broadcast, before any aggregation.
    pub initial_accuracy: f64,
    /// Digest of every broadcast probability mask, starting with the initial one.
    pub broadcast_digests: Vec<[u8; 32]>,
    pub final_theta: Option<ProbMask>,
    /// Final sparse model; absent for the dense baseline.
    pub artifact: Option<ModelArtifact>,
    pub final_accuracy: f64,
    /// Wall-clock seconds per round; kept apart from the deterministic metrics.
    pub round_seconds: Vec<f64>,
    pub param_count: usize,
}

impl ExperimentOutput {
    /// Mean uplink bitrate over the last `n` rounds.
    pub fn mean_uplink_bpp_last(&self, n: usize) -> f64 {
        let tail = &self.metrics[self.metrics.len().saturating_sub(n)..];
        tail.iter().map(|m| m.uplink_bpp).sum::<f64>() / tail.len() as f64
    }
}

pub fn select_participants<R: Rng + ?Sized>(rng: &mut R, clients: usize, k: usize) -> Vec<usize> {
    let mut chosen = index::sample(rng, clients, k).into_vec();
    chosen.sort_unstable();
    chosen
}

struct Uplink {
    bytes: Vec<u8>,
    last_loss: f64,
}

struct Privacy {
    sigma: f64,
    clip: f64,
    table: BiasTable,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let fed = prepare_data(cfg)?;
    run_federated(cfg, &fed, Exec::default())
}

/// Run with caller-provided data and execution mode.
pub fn run_federated(cfg: &ExperimentConfig, fed: &Federation, exec: Exec) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if fed.shards.len() != cfg.clients {
        return Err(Error::Config(format!(
            "{} shards for {} clients",
            fed.shards.len(),
            cfg.clients
        )));
    }
    match cfg.baseline {
        Baseline::Fedpm => run_fedpm(cfg, fed, exec),
        Baseline::Signsgd => run_signsgd(cfg, fed, exec),
    }
}

fn run_fedpm(cfg: &ExperimentConfig, fed: &Federation, exec: Exec) -> Result<ExperimentOutput> {
    let arch = cfg.network()?;
    let d = arch.param_count();
    let client_cfg = cfg.client_config();
    let (server_weights, mut theta) = global_init(cfg)?;
    let server_digest = server_weights.digest();
    // Each client rebuilds w^init from the broadcast seed.
    let client_weights: Vec<FrozenWeights> = exec.try_map(&fed.shards, |_| init_frozen_weights(&arch, server_weights.seed()))?;

    let privacy = match &cfg.dp {
        Some(dp) => {
            let dp_cfg = DpConfig::new(dp.epsilon, dp.delta, dp.clip, d)?;
            let sigma = gaussian_sigma(&dp_cfg);
            Some(Privacy {
                sigma,
                clip: dp.clip,
                table: build_bias_table(sigma, dp.clip, DEFAULT_TABLE_POINTS)?,
            })
        }
        None => None,
    };

    let initial_accuracy = evaluate(
        &arch,
        &server_weights,
        &theta,
        cfg.distill,
        cfg.alpha_ths,
        derive_seed(cfg.seed, Stream::Distill, 0),
        &fed.test,
    )?;
    let mut digests = vec![theta_digest(&theta)];
    let mut aggregator = Aggregator::new(cfg.aggregation_strategy()?, d)?;
    let mut server_rng = stream_rng(cfg.seed, Stream::Participants, 0);
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut round_seconds = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let participants = select_participants(&mut server_rng, cfg.clients, cfg.participants);

        let uplinks: Vec<Uplink> = exec.try_map(&participants, |&k| {
            let w = &client_weights[k];
            if w.digest() != server_digest {
                return Err(Error::Protocol(format!(
                    "client {k} holds different frozen weights than the server"
                )));
            }
            let mut rng = stream_rng(cfg.seed, Stream::Client, round_client_index(round, k));
            let run = train_local_scores(&theta, w, &arch, &fed.shards[k], &client_cfg, &mut rng)
                .map_err(|e| e.with_client_context(round, k))?;
            let released = match &privacy {
                Some(p) => {
                    let boxed = ProbMask::new(
                        run.theta
                            .as_slice()
                            .iter()
                            .map(|&t| t.clamp(p.clip, 1.0 - p.clip))
                            .collect(),
                    )?;
                    let mut noise_rng = stream_rng(cfg.seed, Stream::Privacy, round_client_index(round, k));
                    privatize_mask(&boxed, p.sigma, p.clip, &mut noise_rng)?
                }
                None => run.theta,
            };
            let mask = sample_mask(&released, &mut rng);
            Ok(Uplink {
                bytes: encode_mask(&mask)?.to_bytes(),
                last_loss: run.epoch_losses.last().copied().unwrap_or(f64::NAN),
            })
        })?;

        let coded: Vec<CodedMask> = uplinks
            .iter()
            .map(|u| CodedMask::from_bytes(&u.bytes))
            .collect::<Result<_>>()?;
        let masks: Vec<BinaryMask> = exec.try_map(&coded, |c| {
            let m = decode_mask(c)?;
            if m.len() != d {
                return Err(Error::Protocol(format!("uplink has {} entries, expected {d}", m.len())));
            }
            Ok(m)
        })?;

        theta = aggregator.aggregate(&masks)?;
        if let (Some(p), Aggregator::Simple) = (&privacy, &aggregator) {
            theta = ProbMask::new(
                theta
                    .as_slice()
                    .iter()
                    .map(|&e| correct_bias(e, &p.table).value)
                    .collect(),
            )?;
        }
        digests.push(theta_digest(&theta));

        let acc = evaluate(
            &arch,
            &server_weights,
            &theta,
            cfg.distill,
            cfg.alpha_ths,
            derive_seed(cfg.seed, Stream::Distill, round as u64),
            &fed.test,
        )?;
        let k = coded.len() as f64;
        let freqs: Vec<f64> = coded.iter().map(|c| c.ones_count as f64 / c.n as f64).collect();
        metrics.push(RoundMetrics {
            round,
            accuracy: acc,
            uplink_bpp: coded.iter().map(bitrate).sum::<f64>() / k,
            entropy_bpp: freqs.iter().map(|&p| empirical_entropy(p)).sum::<f64>() / k,
            ones_frequency: freqs.iter().sum::<f64>() / k,
            train_loss: uplinks.iter().map(|u| u.last_loss).sum::<f64>() / k,
            participants: participants.clone(),
        });
        round_seconds.push(started.elapsed().as_secs_f64());
    }

    let final_mask = distill_final(
        &theta,
        cfg.distill,
        cfg.alpha_ths,
        derive_seed(cfg.seed, Stream::Distill, u64::MAX),
    );
    let artifact = ModelArtifact::new(arch.clone(), server_weights.seed(), &final_mask)?;
    let final_accuracy = evaluate_mask(&arch, &server_weights, &final_mask, &fed.test)?;
    Ok(ExperimentOutput {
        metrics,
        initial_accuracy,
        broadcast_digests: digests,
        final_theta: Some(theta),
        artifact: Some(artifact),
        final_accuracy,
        round_seconds,
        param_count: d,
    })
}

fn run_signsgd(cfg: &ExperimentConfig, fed: &Federation, exec: Exec) -> Result<ExperimentOutput> {
    let arch = cfg.network()?;
    let d = arch.param_count();
    let client_cfg = cfg.client_config();
    let (w_init, _) = global_init(cfg)?;
    let mut weights = w_init.values().to_vec();
    let initial_accuracy = accuracy(&arch, &weights, &fed.test)?;
    let mut server_rng = stream_rng(cfg.seed, Stream::Participants, 0);
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut round_seconds = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let participants = select_participants(&mut server_rng, cfg.clients, cfg.participants);
        let clients: Vec<SignClient<'_>> = participants
            .iter()
            .map(|&k| SignClient {
                id: k,
                data: &fed.shards[k],
                seed: derive_seed(cfg.seed, Stream::Client, round_client_index(round, k)),
            })
            .collect();
        let step = signsgd_round(&weights, &arch, &clients, &client_cfg, cfg.server_lr, round, exec)?;
        weights = step.weights;
        let acc = accuracy(&arch, &weights, &fed.test)?;
        metrics.push(RoundMetrics {
            round,
            accuracy: acc,
            uplink_bpp: step.uplink_bpp,
            entropy_bpp: step.entropy_bpp,
            ones_frequency: step.ones_frequency,
            train_loss: step.train_loss,
            participants,
        });
        round_seconds.push(started.elapsed().as_secs_f64());
    }
    let final_accuracy = metrics.last().map_or(initial_accuracy, |m| m.accuracy);
    Ok(ExperimentOutput {
        metrics,
        initial_accuracy,
        broadcast_digests: Vec::new(),
        final_theta: None,
        artifact: None,
        final_accuracy,
        round_seconds,
        param_count: d,
    })
}

/// Clamp-and-wrap helper for callers that build masks from raw values.
pub fn prob_mask_from(values: &[f64]) -> ProbMask {
    ProbMask::from_raw_unchecked(values.iter().map(|&p| clamp_theta(p)).collect())
}

/// Test-set logits for diagnostics.
pub fn logits(arch: &NetworkArch, effective: &[f64], test: &Dataset) -> Result<Array2<f64>> {
    Ok(forward(arch, effective, test.samples().view())?.0)
}
