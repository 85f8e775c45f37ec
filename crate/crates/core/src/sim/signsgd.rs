//! Dense SignSGD with majority vote, used as a 1-bit-per-parameter baseline.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{bitrate, decode_mask, empirical_entropy, encode_mask, CodedMask};
use crate::data::Dataset;
use crate::mask::{BinaryMask, ClientConfig};
use crate::nn::{backward, forward, loss_and_grad, NetworkArch};
use crate::par::Exec;
use crate::{Error, Result};

/// One participating client for a SignSGD round.
#[derive(Debug, Clone, Copy)]
pub struct SignClient<'a> {
    pub id: usize,
    pub data: &'a Dataset,
    pub seed: u64,
}

/// Result of [`signsgd_round`].
#[derive(Debug, Clone)]
pub struct SignRound {
    pub weights: Vec<f64>,
    pub uplink_bpp: f64,
    pub entropy_bpp: f64,
    pub ones_frequency: f64,
    pub train_loss: f64,
}

/// Local dense SGD from `global`; returns the sign bits of the update (`Δ ≥ 0 → 1`)
/// and the mean loss of the last epoch.
pub fn signsgd_client(
    global: &[f64],
    arch: &NetworkArch,
    data: &Dataset,
    cfg: &ClientConfig,
    seed: u64,
) -> Result<(BinaryMask, f64)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Client("local dataset is empty".into()));
    }
    if global.len() != arch.param_count() {
        return Err(Error::Shape(format!(
            "expected {} weights, got {}",
            arch.param_count(),
            global.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = global.to_vec();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.samples().select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let (logits, cache) = forward(arch, &w, x.view())?;
            let (loss, grad_logits) = loss_and_grad(logits.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    round: None,
                    client: None,
                    detail: format!("non-finite loss {loss}"),
                });
            }
            let grad = backward(arch, &cache, grad_logits.view())?;
            w.iter_mut().zip(&grad).for_each(|(wi, g)| *wi -= cfg.learning_rate * g);
            loss_sum += loss;
            batches += 1;
        }
        last_loss = loss_sum / batches as f64;
    }
    let signs = w.iter().zip(global).map(|(a, b)| a - b >= 0.0).collect();
    Ok((BinaryMask::from_bits(signs), last_loss))
}

/// Coordinatewise majority of the `±1` votes: `+1`, `-1`, or `0` on a tie.
pub fn majority_vote(signs: &[BinaryMask]) -> Result<Vec<i8>> {
    let votes = crate::aggregate::sum_masks(signs)?;
    let k = signs.len() as i64;
    Ok(votes
        .into_iter()
        .map(|v| (2 * v as i64 - k).signum() as i8)
        .collect())
}

/// One round: local training, coded sign uplinks, and a majority-vote step of `server_lr`.
pub fn signsgd_round(
    global: &[f64],
    arch: &NetworkArch,
    clients: &[SignClient<'_>],
    cfg: &ClientConfig,
    server_lr: f64,
    round: usize,
    exec: Exec,
) -> Result<SignRound> {
    let uplinks: Vec<(Vec<u8>, f64)> = exec.try_map(clients, |c| {
        let (signs, loss) = signsgd_client(global, arch, c.data, cfg, c.seed)
            .map_err(|e| e.with_client_context(round, c.id))?;
        Ok((encode_mask(&signs)?.to_bytes(), loss))
    })?;
    let coded: Vec<CodedMask> = uplinks
        .iter()
        .map(|(b, _)| CodedMask::from_bytes(b))
        .collect::<Result<_>>()?;
    let signs: Vec<BinaryMask> = coded.iter().map(decode_mask).collect::<Result<_>>()?;
    let vote = majority_vote(&signs)?;
    if vote.len() != global.len() {
        return Err(Error::Protocol(format!(
            "uplink has {} entries, expected {}",
            vote.len(),
            global.len()
        )));
    }
    let weights = global
        .iter()
        .zip(&vote)
        .map(|(&w, &v)| w + server_lr * v as f64)
        .collect();
    let k = coded.len() as f64;
    let freqs: Vec<f64> = coded.iter().map(|c| c.ones_count as f64 / c.n as f64).collect();
    Ok(SignRound {
        weights,
        uplink_bpp: coded.iter().map(bitrate).sum::<f64>() / k,
        entropy_bpp: freqs.iter().map(|&p| empirical_entropy(p)).sum::<f64>() / k,
        ones_frequency: freqs.iter().sum::<f64>() / k,
        train_loss: uplinks.iter().map(|(_, l)| l).sum::<f64>() / k,
    })
}
