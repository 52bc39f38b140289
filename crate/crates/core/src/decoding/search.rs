use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DecodeConfig, LogitSource, LogitVector, StepTrace, Strategy};
use crate::error::{Error, Result};
use crate::TokenId;

/// Tokens produced by one generation. EOS is not included in `tokens`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepTrace>,
    /// Ended on EOS.
    pub finished: bool,
    /// Stopped because the context window filled up.
    pub truncated: bool,
}

pub fn generate<S: LogitSource + ?Sized>(source: &S, cfg: &DecodeConfig) -> Result<Generation> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy(source, cfg.max_new_tokens, cfg.eos_id),
        Strategy::Nucleus {
            top_p,
            temperature,
            seed,
        } => nucleus(source, top_p, temperature, seed, cfg.max_new_tokens, cfg.eos_id),
        Strategy::Beam { width } => {
            let result = beam(source, width, cfg.max_new_tokens, cfg.eos_id)?;
            let mut forced = result.best.tokens.clone();
            if result.best.finished {
                forced.push(cfg.eos_id);
            }
            Ok(Generation {
                steps: teacher_force(source, &forced)?,
                tokens: result.best.tokens,
                finished: result.best.finished,
                truncated: result.truncated,
            })
        }
    }
}

pub fn greedy<S: LogitSource + ?Sized>(source: &S, max_new_tokens: usize, eos: TokenId) -> Result<Generation> {
    sample_loop(source, max_new_tokens, eos, |scores| {
        scores.argmax().ok_or(Error::Empty("logits"))
    })
}

/// Top-p sampling with a ChaCha8 generator seeded from `seed`.
pub fn nucleus<S: LogitSource + ?Sized>(
    source: &S,
    top_p: f32,
    temperature: f32,
    seed: u64,
    max_new_tokens: usize,
    eos: TokenId,
) -> Result<Generation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_loop(source, max_new_tokens, eos, |scores| {
        sample_nucleus(scores, top_p, temperature, &mut rng)
    })
}

fn sample_loop<S, F>(source: &S, max_new_tokens: usize, eos: TokenId, mut pick: F) -> Result<Generation>
where
    S: LogitSource + ?Sized,
    F: FnMut(&LogitVector) -> Result<TokenId>,
{
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    for step in 0..max_new_tokens {
        let Some(out) = source.step(&tokens)? else {
            return Ok(Generation {
                tokens,
                steps,
                finished: false,
                truncated: true,
            });
        };
        let token = pick(&out.scores)?;
        steps.push(out.into_trace(step, token));
        if token == eos {
            return Ok(Generation {
                tokens,
                steps,
                finished: true,
                truncated: false,
            });
        }
        tokens.push(token);
    }
    Ok(Generation {
        tokens,
        steps,
        finished: false,
        truncated: false,
    })
}

/// Replays `tokens` and records the trace of every step.
pub fn teacher_force<S: LogitSource + ?Sized>(source: &S, tokens: &[TokenId]) -> Result<Vec<StepTrace>> {
    let mut steps = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        match source.step(&tokens[..i])? {
            Some(out) => steps.push(out.into_trace(i, t)),
            None => break,
        }
    }
    Ok(steps)
}

/// Kept tokens and their renormalised probabilities, most likely first.
///
/// Logits are divided by `temperature`, softmaxed in `f64`, sorted by
/// probability (lower id first on ties), and the shortest prefix whose
/// mass reaches `top_p` is kept. At least one token is always kept.
pub fn nucleus_distribution(scores: &LogitVector, top_p: f32, temperature: f32) -> Result<Vec<(TokenId, f64)>> {
    if scores.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if !(top_p > 0.0 && top_p <= 1.0) || !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "top_p {top_p} must be in (0, 1] and temperature {temperature} > 0"
        )));
    }
    let t = f64::from(temperature);
    let scaled: Vec<f64> = scores.values().iter().map(|&v| f64::from(v) / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut ranked: Vec<(TokenId, f64)> = exps
        .iter()
        .enumerate()
        .map(|(i, e)| (i as TokenId, e / total))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let target = f64::from(top_p);
    let mut mass = 0.0;
    let mut keep = ranked.len();
    for (i, (_, p)) in ranked.iter().enumerate() {
        mass += p;
        if mass >= target {
            keep = i + 1;
            break;
        }
    }
    ranked.truncate(keep);
    let kept: f64 = ranked.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut ranked {
        *p /= kept;
    }
    Ok(ranked)
}

pub fn sample_nucleus<R: Rng + ?Sized>(
    scores: &LogitVector,
    top_p: f32,
    temperature: f32,
    rng: &mut R,
) -> Result<TokenId> {
    let dist = nucleus_distribution(scores, top_p, temperature)?;
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(token, p) in &dist {
        cum += p;
        if u < cum {
            return Ok(token);
        }
    }
    Ok(dist.last().expect("nucleus keeps at least one token").0)
}

/// `log_softmax` in `f64`.
pub fn log_softmax(scores: &LogitVector) -> Vec<f64> {
    let xs: Vec<f64> = scores.values().iter().map(|&v| f64::from(v)).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, without the terminating EOS.
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities, including EOS when finished.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Scored length: generated tokens plus the EOS if present.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Length-normalised score: `log_prob / scored_len`.
    pub fn score(&self) -> f64 {
        match self.scored_len() {
            0 => 0.0,
            n => self.log_prob / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Every finished hypothesis plus the live beams at the end, best first.
    pub beams: Vec<Hypothesis>,
    pub truncated: bool,
}

/// Orders by normalised score (higher first), then lexicographically
/// smaller token sequence.
fn final_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over length-normalised log-probabilities.
///
/// Each step expands every live beam over the whole vocabulary and keeps
/// the `width` best candidates by cumulative log-probability (ties: lower
/// token id, then lower beam index). Candidates ending in EOS retire to the
/// finished pool. The search stops when no beam is live or after
/// `max_new_tokens` steps; the result is the best of the finished and live
/// hypotheses by `log_prob / length`.
pub fn beam<S: LogitSource + ?Sized>(
    source: &S,
    width: usize,
    max_new_tokens: usize,
    eos: TokenId,
) -> Result<BeamResult> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".to_string()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut truncated = false;

    for _ in 0..max_new_tokens {
        if live.is_empty() {
            break;
        }
        // (log_prob, token, beam index)
        let mut candidates: Vec<(f64, TokenId, usize)> = Vec::new();
        let mut expanded = vec![false; live.len()];
        for (b, hyp) in live.iter().enumerate() {
            let Some(out) = source.step(&hyp.tokens)? else {
                truncated = true;
                continue;
            };
            expanded[b] = true;
            for (t, lp) in log_softmax(&out.scores).into_iter().enumerate() {
                candidates.push((hyp.log_prob + lp, t as TokenId, b));
            }
        }
        for (b, hyp) in live.iter().enumerate() {
            if !expanded[b] {
                done.push(hyp.clone());
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for &(log_prob, token, b) in candidates.iter().take(width) {
            let mut tokens = live[b].tokens.clone();
            if token == eos {
                done.push(Hypothesis {
                    tokens,
                    log_prob,
                    finished: true,
                });
            } else {
                tokens.push(token);
                next.push(Hypothesis {
                    tokens,
                    log_prob,
                    finished: false,
                });
            }
        }
        live = next;
    }

    let mut beams = done;
    beams.extend(live);
    // Stable sort keeps insertion order (lower beam index first) on full ties.
    beams.sort_by(final_order);
    let best = beams
        .first()
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("beam search produced no hypotheses".to_string()))?;
    Ok(BeamResult {
        best,
        beams,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::StepOutput;

    /// Fixed logits per history length.
    struct Table(Vec<Vec<f32>>);

    impl LogitSource for Table {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }

        fn step(&self, history: &[TokenId]) -> Result<Option<StepOutput>> {
            let row = self.0[history.len().min(self.0.len() - 1)].clone();
            let v = LogitVector::new(row)?;
            Ok(Some(StepOutput {
                scores: v.clone(),
                cond: v,
                text: None,
                masses: vec![],
            }))
        }
    }

    #[test]
    fn constant_eos_gives_empty_generation() {
        let src = Table(vec![vec![0.0, 5.0, 1.0]]);
        let g = greedy(&src, 10, 1).unwrap();
        assert!(g.tokens.is_empty());
        assert!(g.finished);
        assert_eq!(g.steps.len(), 1);
    }

    #[test]
    fn greedy_stops_at_budget() {
        let src = Table(vec![vec![0.0, -5.0, 1.0]]);
        let g = greedy(&src, 3, 1).unwrap();
        assert_eq!(g.tokens, vec![2, 2, 2]);
        assert!(!g.finished && !g.truncated);
    }

    #[test]
    fn beam_tie_prefers_lower_token_sequence() {
        // Tokens 2 and 3 are exactly tied at every step; EOS is never chosen.
        let src = Table(vec![vec![-50.0, -50.0, 1.0, 1.0]]);
        let r = beam(&src, 4, 2, 1).unwrap();
        assert_eq!(r.best.tokens, vec![2, 2]);
        assert_eq!(r.beams[0].score(), r.beams[1].score());
        assert_eq!(r.beams[1].tokens, vec![2, 3]);
    }

    #[test]
    fn nucleus_tiny_top_p_is_argmax() {
        let v = LogitVector::new(vec![0.1, 0.3, 2.0, 0.2]).unwrap();
        let d = nucleus_distribution(&v, 1e-6, 1.0).unwrap();
        assert_eq!(d, vec![(2, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(sample_nucleus(&v, 1e-6, 1.0, &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn nucleus_keeps_prefix_reaching_top_p() {
        let v = LogitVector::new(vec![0.0, (2.0f32).ln(), (3.0f32).ln(), (4.0f32).ln()]).unwrap();
        // Probabilities 0.1, 0.2, 0.3, 0.4.
        let d = nucleus_distribution(&v, 0.65, 1.0).unwrap();
        let ids: Vec<TokenId> = d.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![3, 2]);
        assert!((d[0].1 - 4.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn teacher_force_replays_prefixes() {
        let src = Table(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let steps = teacher_force(&src, &[0, 1]).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[1].token, 1);
        assert_eq!(steps[1].cond_logits.values(), &[1.0, 0.0]);
    }
}
