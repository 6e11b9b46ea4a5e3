use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::action::{parse_action, parse_response, Action};
use crate::executor::{build_prompt, HistorySummary, Trajectory};
use crate::gateway::{Backend, Judged, PromptBundle, Role};
use crate::markup::all_tags;
use crate::sim::{ActionForm, Scenario, ScreenSnapshot};

use super::reward::{score_accuracy, RewardConfig};
use super::{bbox_for, Alternate, DataError, StepSample};

pub const DIFFICULTY_RUNS: u8 = 8;
pub const DEFAULT_KEEP_ZERO_FRACTION: f64 = 0.25;

/// One sample per executed step. Sample `t` carries the summaries of the
/// executed steps before it.
pub fn split_trajectory(trajectory: &Trajectory) -> Result<Vec<StepSample>, DataError> {
    let mut out = Vec::new();
    let mut history = HistorySummary::default();
    for step in &trajectory.steps {
        if !step.executed() {
            continue;
        }
        let action = step.action.clone().expect("executed steps carry an action");
        let mut sample = StepSample::new(&trajectory.instruction, step.snapshot_before.clone(), action);
        sample.history = history.clone();
        sample.trajectory_id = trajectory.id.clone();
        sample.step_index = step.index;
        sample.corrected = trajectory.corrected;
        out.push(sample);
        if let Some(entry) = step.history_entry() {
            history.push(entry);
        }
    }
    if out.is_empty() {
        return Err(DataError::EmptyTrajectory);
    }
    Ok(out)
}

fn same_action(a: &Action, b: &Action) -> bool {
    match (a, b) {
        (Action::Open { text: x }, Action::Open { text: y }) => x.trim().eq_ignore_ascii_case(y.trim()),
        _ => a == b,
    }
}

fn form_matches(form: &ActionForm, gold: &Action, snapshot: &ScreenSnapshot) -> bool {
    match form {
        ActionForm::Action(a) => same_action(a, gold),
        ActionForm::Widget(id) => match (gold, snapshot.widget(id)) {
            (Action::Click { coordinate }, Some(w)) => w.bbox.contains(coordinate.x, coordinate.y),
            _ => false,
        },
    }
}

fn form_alternate(form: &ActionForm, snapshot: &ScreenSnapshot) -> Option<Alternate> {
    match form {
        ActionForm::Action(a) => {
            let bbox = a.tap_point().map(|p| bbox_for(snapshot, p.x, p.y));
            Some(Alternate { action: a.clone(), bbox })
        }
        ActionForm::Widget(id) => {
            let w = snapshot.widget(id)?;
            let (x, y) = w.bbox.center();
            Some(Alternate { action: Action::click(x, y), bbox: Some(w.bbox) })
        }
    }
}

fn push_alternate(sample: &mut StepSample, alt: Alternate) {
    if same_action(&alt.action, &sample.gold) || sample.alternates.iter().any(|a| a.action == alt.action) {
        return;
    }
    // A click that lands in the gold box is the gold action already.
    if let (Some(p), Some(b)) = (alt.action.tap_point(), sample.gold_bbox) {
        if alt.action.kind() == sample.gold.kind() && b.strictly_contains(p.x, p.y) {
            return;
        }
    }
    sample.alternates.push(alt);
}

const JUDGE_SYSTEM: &str = "You see one phone screen and the action a demonstrator took on it. List other \
single actions that would have exactly the same effect, one JSON action per <alternate></alternate> block. \
Reply <none/> when there are none.";

fn judge_prompt(sample: &StepSample) -> PromptBundle {
    PromptBundle::new(Role::MultipathJudge, JUDGE_SYSTEM)
        .text(format!("## Instruction\n{}", sample.instruction))
        .text(format!("## Taken action\n{}", sample.gold))
        .snapshot(&sample.snapshot)
        .meta("instruction", sample.instruction.as_str())
        .meta("screen", sample.snapshot.screen_ref().to_string())
}

/// Adds equally valid actions from the scenario's equivalence table and,
/// when given, a judge backend. A failing judge leaves the rule result.
pub fn augment_multipath(sample: &StepSample, scenario: &Scenario, judge: Option<&dyn Backend>) -> Judged<StepSample> {
    let mut out = sample.clone();
    let screen = sample.snapshot.screen_ref();
    for eq in scenario.equivalences.iter().filter(|e| e.screen == screen) {
        if !eq.forms.iter().any(|f| form_matches(f, &sample.gold, &sample.snapshot)) {
            continue;
        }
        for form in &eq.forms {
            if let Some(alt) = form_alternate(form, &sample.snapshot) {
                push_alternate(&mut out, alt);
            }
        }
    }
    let Some(judge) = judge else { return Judged::clean(out) };
    let reply = match judge.complete(&judge_prompt(sample)) {
        Ok(r) => r,
        Err(e) => return Judged::warned(out, format!("multipath judge failed: {e}")),
    };
    let mut bad = 0;
    for block in all_tags(&reply, "alternate") {
        match parse_action(block) {
            Ok(a) if !matches!(a, Action::Ask { .. } | Action::Terminate { .. }) => {
                let bbox = a.tap_point().map(|p| bbox_for(&sample.snapshot, p.x, p.y));
                push_alternate(&mut out, Alternate { action: a, bbox });
            }
            _ => bad += 1,
        }
    }
    if bad > 0 {
        return Judged::warned(out, format!("multipath judge gave {bad} unusable alternate(s)"));
    }
    Judged::clean(out)
}

/// Drops every sample the policy always gets right and keeps each
/// never-solved sample with probability `keep_zero_fraction`.
pub fn filter_by_difficulty(
    samples: &[StepSample],
    keep_zero_fraction: f64,
    seed: u64,
) -> Result<Vec<StepSample>, DataError> {
    if !(0.0..=1.0).contains(&keep_zero_fraction) {
        return Err(DataError::InvalidFraction(keep_zero_fraction.to_string()));
    }
    if let Some(i) = samples.iter().position(|s| s.difficulty_count.is_none()) {
        return Err(DataError::MissingDifficulty(i));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in samples {
        let c = s.difficulty_count.expect("checked above");
        let keep = match c {
            0 => rng.random_bool(keep_zero_fraction),
            c if c >= DIFFICULTY_RUNS => false,
            _ => true,
        };
        if keep {
            out.push(s.clone());
        }
    }
    Ok(out)
}

/// Asks the policy `runs` times and counts accurate answers. Backend errors
/// and unreadable replies count as wrong.
pub fn count_correct(sample: &StepSample, policy: &dyn Backend, runs: u8, temperature: f64) -> u8 {
    let bundle = build_prompt(&sample.instruction, &sample.history, &sample.snapshot, &[], &[], &[])
        .temperature(temperature);
    let cfg = RewardConfig::default();
    let mut correct = 0;
    for i in 0..runs {
        let b = bundle.clone().meta("sample_run", i.to_string());
        let Ok(raw) = policy.complete(&b) else { continue };
        if let Ok(r) = parse_response(&raw) {
            if score_accuracy(&r.action, sample, &cfg).acc == 1 {
                correct += 1;
            }
        }
    }
    correct
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Widget, WidgetKind, BBox};
    use std::collections::BTreeMap;

    fn snap() -> ScreenSnapshot {
        ScreenSnapshot {
            app: "Launcher".into(),
            screen_id: "home".into(),
            widgets: vec![Widget {
                id: "icon".into(),
                kind: WidgetKind::Icon,
                text: "Clock".into(),
                bbox: BBox::new(100, 100, 200, 200),
                state: BTreeMap::new(),
            }],
            screen_width: 1080,
            screen_height: 2400,
            step_index: 0,
        }
    }

    fn counted(c: u8) -> StepSample {
        let mut s = StepSample::new("x", snap(), Action::click(150, 150));
        s.difficulty_count = Some(c);
        s
    }

    #[test]
    fn filter_rules() {
        assert!(filter_by_difficulty(&vec![counted(8); 50], 1.0, 1).unwrap().is_empty());
        assert_eq!(filter_by_difficulty(&vec![counted(4); 50], 0.0, 1).unwrap().len(), 50);
        assert!(filter_by_difficulty(&vec![counted(0); 50], 0.0, 1).unwrap().is_empty());
        assert_eq!(filter_by_difficulty(&vec![counted(0); 50], 1.0, 1).unwrap().len(), 50);
        let a = filter_by_difficulty(&vec![counted(0); 100], 0.5, 9).unwrap().len();
        let b = filter_by_difficulty(&vec![counted(0); 100], 0.5, 9).unwrap().len();
        assert_eq!(a, b);
    }

    #[test]
    fn filter_errors() {
        let mut missing = vec![counted(3), counted(3)];
        missing[1].difficulty_count = None;
        assert_eq!(filter_by_difficulty(&missing, 0.25, 0), Err(DataError::MissingDifficulty(1)));
        assert!(matches!(filter_by_difficulty(&[], 1.5, 0), Err(DataError::InvalidFraction(_))));
        assert!(matches!(filter_by_difficulty(&[], f64::NAN, 0), Err(DataError::InvalidFraction(_))));
    }

    #[test]
    fn miss_gets_a_tight_box() {
        let s = StepSample::new("x", snap(), Action::click(500, 500));
        assert_eq!(s.gold_bbox, Some(BBox::new(499, 499, 501, 501)));
        let hit = StepSample::new("x", snap(), Action::click(150, 150));
        assert_eq!(hit.gold_bbox, Some(BBox::new(100, 100, 200, 200)));
        assert_eq!(StepSample::new("x", snap(), Action::open("Clock")).gold_bbox, None);
    }
}
