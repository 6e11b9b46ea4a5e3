use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::action::{extract_action, parse_response, Action};
use crate::sim::{BBox, SwipeDirection};

use super::StepSample;

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_F1_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Weight of the format reward.
    pub alpha: f64,
    /// Token F1 at or above which two texts count as the same.
    pub f1_threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, f1_threshold: DEFAULT_F1_THRESHOLD }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub kind: u8,
    pub params: u8,
    pub acc: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fmt: u8,
    pub r_type: u8,
    pub r_params: u8,
    pub r_acc: u8,
    pub r_final: f64,
    pub alpha: f64,
}

/// 1 when the reply has all three sections in order and a valid action.
pub fn score_format(raw: &str) -> u8 {
    u8::from(parse_response(raw).is_ok())
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token-level F1 over lowercase whitespace tokens, counting repeats.
pub fn token_f1(predicted: &str, reference: &str) -> f64 {
    let p = tokens(predicted);
    let r = tokens(reference);
    if p.is_empty() && r.is_empty() {
        return 1.0;
    }
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn params_match(predicted: &Action, reference: &Action, bbox: Option<BBox>, cfg: &RewardConfig) -> bool {
    use Action::*;
    match (predicted, reference) {
        (Click { coordinate: p }, Click { coordinate: r }) | (LongPress { coordinate: p, .. }, LongPress { coordinate: r, .. }) => {
            match bbox {
                Some(b) => b.strictly_contains(p.x, p.y),
                None => p == r,
            }
        }
        (Swipe { coordinate: a, coordinate2: b }, Swipe { coordinate: c, coordinate2: d }) => {
            SwipeDirection::of((a.x, a.y), (b.x, b.y)) == SwipeDirection::of((c.x, c.y), (d.x, d.y))
        }
        (Type { text: p }, Type { text: r })
        | (Open { text: p }, Open { text: r })
        | (Answer { text: p }, Answer { text: r })
        | (Ask { text: p }, Ask { text: r }) => token_f1(p, r) >= cfg.f1_threshold,
        (SystemButton { button: p }, SystemButton { button: r }) => p == r,
        (Terminate { status: p }, Terminate { status: r }) => p == r,
        (ClearText, ClearText) | (Wait { .. }, Wait { .. }) => true,
        _ => false,
    }
}

fn accuracy_against(predicted: &Action, reference: &Action, bbox: Option<BBox>, cfg: &RewardConfig) -> Accuracy {
    let kind = u8::from(predicted.kind() == reference.kind());
    let params = u8::from(kind == 1 && params_match(predicted, reference, bbox, cfg));
    Accuracy { kind, params, acc: kind & params }
}

/// Scores a prediction against the gold action and every alternate and
/// keeps the best result.
pub fn score_accuracy(predicted: &Action, sample: &StepSample, cfg: &RewardConfig) -> Accuracy {
    let gold = accuracy_against(predicted, &sample.gold, sample.gold_bbox, cfg);
    sample
        .alternates
        .iter()
        .map(|a| accuracy_against(predicted, &a.action, a.bbox, cfg))
        .fold(gold, |best, a| if (a.acc, a.kind) > (best.acc, best.kind) { a } else { best })
}

pub fn score_final(r_acc: u8, r_fmt: u8, alpha: f64) -> f64 {
    f64::from(r_acc) + alpha * f64::from(r_fmt)
}

/// Full reward of one raw reply. Accuracy still reads the action block when
/// the layout is wrong.
pub fn score_response(raw: &str, sample: &StepSample, cfg: &RewardConfig) -> RewardBreakdown {
    let r_fmt = score_format(raw);
    let acc = match extract_action(raw) {
        Ok(a) => score_accuracy(&a, sample, cfg),
        Err(_) => Accuracy { kind: 0, params: 0, acc: 0 },
    };
    RewardBreakdown {
        r_fmt,
        r_type: acc.kind,
        r_params: acc.params,
        r_acc: acc.acc,
        r_final: score_final(acc.acc, r_fmt, cfg.alpha),
        alpha: cfg.alpha,
    }
}
