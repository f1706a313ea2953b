use std::sync::Arc;

use mmkd::data::{DataConfig, Dataset, Features};
use mmkd::losses::{DistillConfig, Divergence, StageWeights, TargetMask};
use mmkd::model::{EncoderConfig, ModelConfig, MultimodalModel, Role, VisualEncoder};
use mmkd::schedule::{
    jsonl_sink, run_ablation, run_recipe, run_recipe_from, run_stage, train_teacher, variants,
    AblationAxis, AblationOutputs, AblationTable, EpochRecord, FreezePolicy, Recipe, RunOutputs,
    StageKind, TrainConfig, TrainContext, RECIPE_SWEEP,
};
use mmkd::tensor::{GroupKind, ParameterGroup};
use mmkd::Error;
use proptest::prelude::*;

struct Fixture {
    data: Dataset,
    encoder: Arc<VisualEncoder>,
    features: Features,
    train: TrainConfig,
}

impl Fixture {
    fn new() -> Self {
        let data = Dataset::generate(&DataConfig {
            pretrain: 24,
            finetune: 24,
            eval: 16,
            seed: 3,
            ..DataConfig::default()
        })
        .unwrap();
        let encoder = Arc::new(VisualEncoder::new(&encoder_config()).unwrap());
        let features = Features::build(&encoder, &data).unwrap();
        let train = TrainConfig {
            batch_size: 8,
            pretrain_epochs: 2,
            finetune_epochs: 2,
            eval_every_epoch: false,
            ..TrainConfig::default()
        };
        Fixture {
            data,
            encoder,
            features,
            train,
        }
    }

    fn ctx(&self) -> TrainContext<'_> {
        TrainContext {
            data: &self.data,
            features: &self.features,
            train: &self.train,
        }
    }

    fn config(&self, role: Role, dim: usize) -> ModelConfig {
        let mut c = ModelConfig::with_width(role, self.data.vocab().len(), dim, 1);
        c.encoder = encoder_config();
        c.llm_heads = 2;
        c.mlp_ratio = 2;
        c
    }

    fn student(&self, seed: u64) -> MultimodalModel {
        MultimodalModel::new(&self.config(Role::Student, 8), self.encoder.clone(), seed).unwrap()
    }

    fn teacher(&self) -> MultimodalModel {
        MultimodalModel::new(&self.config(Role::Teacher, 16), self.encoder.clone(), 99).unwrap()
    }

    fn recipe(&self, label: &str, distill: &DistillConfig) -> Recipe {
        Recipe::parse(label, &self.train, distill).unwrap()
    }
}

fn encoder_config() -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        heads: 2,
        ..EncoderConfig::default()
    }
}

fn snapshot(m: &MultimodalModel) -> [ParameterGroup; 3] {
    GroupKind::ALL.map(|k| m.group(k).clone())
}

fn zero_distill() -> DistillConfig {
    DistillConfig {
        dpt: StageWeights::ZERO,
        dft: StageWeights::ZERO,
        ..DistillConfig::default()
    }
}

#[test]
fn recipe_examples() {
    let d = DistillConfig::default();
    let t = TrainConfig::default();
    let r = Recipe::parse("PT-SFT", &t, &d).unwrap();
    assert_eq!(r.stages.len(), 2);
    assert!(!r.needs_teacher());

    let r = Recipe::parse("DPT-SFT-DFT", &t, &d).unwrap();
    let needs: Vec<_> = r.stages.iter().map(|s| s.kind.needs_teacher()).collect();
    assert_eq!(needs, [true, false, true]);
    assert_eq!(r.stages[0].epochs, 3);
    assert_eq!(r.stages[2].epochs, 5);
    assert_eq!(r.stages[0].freeze, FreezePolicy::PROJECTOR);
    assert_eq!(r.stages[2].freeze, FreezePolicy::PROJECTOR_LLM);

    for bad in ["SFT-DPT", "PT-PT", "DPT-SFT-PT", "PT-XFT", "", "pt-sft"] {
        assert!(
            matches!(Recipe::parse_kinds(bad), Err(Error::Parse(_))),
            "{bad:?}"
        );
    }
}

#[test]
fn pt_sft_and_dpt_sft_differ_only_in_the_first_stage() {
    let d = DistillConfig::default();
    let t = TrainConfig::default();
    let a = Recipe::parse("PT-SFT", &t, &d).unwrap();
    let b = Recipe::parse("DPT-SFT", &t, &d).unwrap();
    assert_eq!(a.stages[1], b.stages[1]);
    assert_eq!(a.stages[0].freeze, b.stages[0].freeze);
    assert_eq!(a.stages[0].split, b.stages[0].split);
    assert_eq!(a.stages[0].epochs, b.stages[0].epochs);
    assert_ne!(a.stages[0].kind, b.stages[0].kind);
}

#[test]
fn freeze_policies_never_include_the_encoder() {
    for kind in StageKind::ALL {
        let groups = kind.freeze_policy().trainable_groups();
        assert!(!groups.contains(&GroupKind::VisualEncoder));
        let expected: &[GroupKind] = if kind.is_pretraining() {
            &[GroupKind::Projector]
        } else {
            &[GroupKind::Projector, GroupKind::Llm]
        };
        assert_eq!(groups, expected, "{kind}");
    }
}

fn kind_strategy() -> impl Strategy<Value = Vec<StageKind>> {
    (
        prop::option::of(prop::sample::select(vec![StageKind::Pt, StageKind::Dpt])),
        prop::collection::vec(
            prop::sample::select(vec![StageKind::Sft, StageKind::Dft]),
            0..4,
        ),
    )
        .prop_filter_map("non-empty", |(first, rest)| {
            let v: Vec<_> = first.into_iter().chain(rest).collect();
            (!v.is_empty()).then_some(v)
        })
}

proptest! {
    #[test]
    fn recipe_label_round_trips(kinds in kind_strategy()) {
        let label = kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("-");
        let r = Recipe::parse(&label, &TrainConfig::default(), &DistillConfig::default()).unwrap();
        prop_assert_eq!(r.label(), label.clone());
        prop_assert_eq!(r.to_string(), label);
        let parsed: Vec<_> = r.stages.iter().map(|s| s.kind).collect();
        prop_assert_eq!(parsed, kinds);
    }
}

#[test]
fn every_stage_leaves_frozen_groups_bitwise_constant() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let d = DistillConfig::default();
    for kind in StageKind::ALL {
        let plan = &f.recipe(kind.as_str(), &d).stages[0];
        let mut s = f.student(1);
        let before = snapshot(&s);
        run_stage(
            &mut s,
            Some(&teacher),
            plan,
            f.ctx(),
            kind.as_str(),
            0,
            0,
            &mut RunOutputs::default(),
        )
        .unwrap();
        for (k, g) in GroupKind::ALL.into_iter().zip(&before) {
            let same = s.group(k).bit_eq(g);
            assert_eq!(same, !plan.freeze.trains(k), "{kind}: group {k}");
        }
    }
}

#[test]
fn teacher_is_untouched_and_gradient_free_through_distillation() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let before = snapshot(&teacher);
    let recipe = f.recipe("DPT-SFT-DFT", &DistillConfig::default());
    run_recipe(
        &recipe,
        &f.config(Role::Student, 8),
        f.encoder.clone(),
        Some(&teacher),
        f.ctx(),
        4,
        &mut RunOutputs::default(),
    )
    .unwrap();
    for (k, g) in GroupKind::ALL.into_iter().zip(&before) {
        assert!(teacher.group(k).bit_eq(g), "teacher group {k} changed");
        for (name, t) in teacher.group(k).iter() {
            assert!(t.grad().is_none(), "teacher {name} holds a gradient");
        }
    }
}

fn trajectory(
    f: &Fixture,
    label: &str,
    distill: &DistillConfig,
    teacher: Option<&MultimodalModel>,
) -> (Vec<[ParameterGroup; 3]>, Vec<EpochRecord>) {
    let plan = &f.recipe(label, distill).stages[0];
    let mut s = f.student(7);
    let mut steps = Vec::new();
    let mut hook = |_, _: &_, m: &MultimodalModel| {
        steps.push(snapshot(m));
        Ok(())
    };
    let mut out = RunOutputs {
        on_step: Some(&mut hook),
        ..RunOutputs::default()
    };
    let (_, records) = run_stage(&mut s, teacher, plan, f.ctx(), label, 0, 0, &mut out).unwrap();
    (steps, records)
}

#[test]
fn zero_weight_dpt_follows_the_pt_trajectory_step_for_step() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let (pt, pt_rec) = trajectory(&f, "PT", &DistillConfig::default(), None);
    let (dpt, dpt_rec) = trajectory(&f, "DPT", &zero_distill(), Some(&teacher));
    assert_eq!(pt.len(), 6);
    assert_eq!(pt.len(), dpt.len());
    for (i, (a, b)) in pt.iter().zip(&dpt).enumerate() {
        for (ga, gb) in a.iter().zip(b) {
            assert!(ga.bit_eq(gb), "step {}", i + 1);
        }
    }
    for (a, b) in pt_rec.iter().zip(&dpt_rec) {
        assert_eq!(a.l_reg.to_bits(), b.l_reg.to_bits());
        assert_eq!(b.total.to_bits(), b.l_reg.to_bits());
    }
}

#[test]
fn zero_weight_dft_loss_equals_the_regression_loss() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let (sft, sft_rec) = trajectory(&f, "SFT", &DistillConfig::default(), None);
    let (dft, dft_rec) = trajectory(&f, "DFT", &zero_distill(), Some(&teacher));
    for r in &dft_rec {
        assert_eq!(r.total, r.l_reg);
        assert!(r.l_res > 0.0 && r.l_vis > 0.0 && r.l_rel >= 0.0);
    }
    for (a, b) in sft_rec.iter().zip(&dft_rec) {
        assert_eq!(a.l_reg, b.l_reg);
    }
    for (a, b) in sft.iter().zip(&dft) {
        assert!(a.iter().zip(b).all(|(x, y)| x.bit_eq(y)));
    }
}

#[test]
fn distillation_without_a_teacher_is_a_configuration_error() {
    let f = Fixture::new();
    let d = DistillConfig::default();
    for label in ["DPT", "DFT"] {
        let plan = &f.recipe(label, &d).stages[0];
        let mut s = f.student(1);
        let err = run_stage(
            &mut s,
            None,
            plan,
            f.ctx(),
            label,
            0,
            0,
            &mut RunOutputs::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
    let err = run_recipe(
        &f.recipe("PT-SFT-DFT", &d),
        &f.config(Role::Student, 8),
        f.encoder.clone(),
        None,
        f.ctx(),
        0,
        &mut RunOutputs::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("teacher"), "{err}");
}

#[test]
fn teacher_with_another_vocabulary_is_rejected() {
    let f = Fixture::new();
    let mut c = f.config(Role::Teacher, 16);
    c.vocab_size += 1;
    let teacher = MultimodalModel::new(&c, f.encoder.clone(), 1).unwrap();
    let plan = &f.recipe("DFT", &DistillConfig::default()).stages[0];
    let err = run_stage(
        &mut f.student(1),
        Some(&teacher),
        plan,
        f.ctx(),
        "DFT",
        0,
        0,
        &mut RunOutputs::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn repeated_runs_produce_identical_records() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let recipe = f.recipe("DPT-SFT-DFT", &DistillConfig::default());
    let run = || {
        run_recipe(
            &recipe,
            &f.config(Role::Student, 8),
            f.encoder.clone(),
            Some(&teacher),
            f.ctx(),
            11,
            &mut RunOutputs::default(),
        )
        .unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra.outcome(), rb.outcome());
    assert!(ra.eval.accuracy.is_finite() && ra.eval.ce.is_finite());
    for k in GroupKind::ALL {
        assert!(a.group(k).bit_eq(b.group(k)));
    }
}

#[test]
fn resuming_from_a_stage_checkpoint_matches_the_uninterrupted_run() {
    let f = Fixture::new();
    let teacher = f.teacher();
    let dir = tempfile::tempdir().unwrap();
    let recipe = f.recipe("DPT-SFT-DFT", &DistillConfig::default());
    let mut out = RunOutputs {
        checkpoint_dir: Some(dir.path()),
        ..RunOutputs::default()
    };
    let (full, full_rec) = run_recipe(
        &recipe,
        &f.config(Role::Student, 8),
        f.encoder.clone(),
        Some(&teacher),
        f.ctx(),
        5,
        &mut out,
    )
    .unwrap();
    assert_eq!(full_rec.checkpoints.len(), 3);
    assert!(full_rec.checkpoints.iter().all(|p| p.exists()));

    for k in 1..3 {
        let loaded =
            MultimodalModel::load_path(&full_rec.checkpoints[k - 1], Some(f.encoder.clone()))
                .unwrap();
        let (resumed, rec) = run_recipe_from(
            &recipe,
            loaded,
            k,
            Some(&teacher),
            f.ctx(),
            5,
            &mut RunOutputs::default(),
        )
        .unwrap();
        for g in GroupKind::ALL {
            assert!(resumed.group(g).bit_eq(full.group(g)), "resume at {k}: {g}");
        }
        assert_eq!(rec.eval, full_rec.eval);
        assert_eq!(rec.stages, full_rec.stages[k..]);
        assert_eq!(rec.resumed_at, Some(k));
    }
}

#[test]
fn teacher_training_runs_pt_then_sft() {
    let f = Fixture::new();
    let cfg = f.config(Role::Teacher, 16);
    let enc_before = f.encoder.params().clone();
    let (t, rec) = train_teacher(
        &cfg,
        f.encoder.clone(),
        f.ctx(),
        2,
        &mut RunOutputs::default(),
    )
    .unwrap();
    let kinds: Vec<_> = rec.stages.iter().map(|s| s.stage).collect();
    assert_eq!(kinds, [StageKind::Pt, StageKind::Sft]);
    assert_eq!(rec.recipe, "PT-SFT");
    assert!(t.encoder().params().bit_eq(&enc_before));
    assert!(!t.group(GroupKind::Projector).trainable());
    assert!(!t.group(GroupKind::Llm).trainable());
}

#[test]
fn metrics_stream_has_one_json_line_per_epoch() {
    let mut f = Fixture::new();
    f.train.eval_every_epoch = true;
    let mut buf = Vec::new();
    {
        let mut sink = jsonl_sink(&mut buf);
        let mut out = RunOutputs {
            on_epoch: Some(&mut sink),
            ..RunOutputs::default()
        };
        run_recipe(
            &f.recipe("PT-SFT", &DistillConfig::default()),
            &f.config(Role::Student, 8),
            f.encoder.clone(),
            None,
            f.ctx(),
            1,
            &mut out,
        )
        .unwrap();
    }
    let text = String::from_utf8(buf).unwrap();
    let records: Vec<EpochRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 4);
    assert_eq!(records[0].stage, StageKind::Pt);
    assert_eq!(records[3].stage, StageKind::Sft);
    assert_eq!(records[3].epoch, 2);
    assert!(records.iter().all(|r| r.eval_accuracy.is_some()));
    assert!(records.iter().all(|r| r.total == r.l_reg && r.l_rel == 0.0));
}

#[test]
fn ablation_axes_have_the_expected_cells() {
    let t = TrainConfig::default();
    let d = DistillConfig::default();
    let names = ["small".to_string(), "large".to_string()];
    let labels = |axis| -> Vec<String> {
        variants(axis, &t, &d, &names)
            .unwrap()
            .into_iter()
            .map(|v| v.label)
            .collect()
    };
    assert_eq!(labels(AblationAxis::Recipes), RECIPE_SWEEP);
    assert_eq!(labels(AblationAxis::Divergences), ["FKL", "RKL", "JSD"]);
    assert_eq!(labels(AblationAxis::TeacherSizes), names);

    let cells = variants(AblationAxis::Targets, &t, &d, &names).unwrap();
    assert_eq!(cells.len(), 8);
    for (i, cell) in cells.iter().enumerate() {
        let mask = TargetMask::SWEEP[i % 4];
        let (dpt, dft) = (
            cell.recipe.stages[0].distill.dpt.targets,
            cell.recipe.stages[2].distill.dft.targets,
        );
        if i < 4 {
            assert_eq!((dpt, dft), (mask, TargetMask::default()));
        } else {
            assert_eq!((dpt, dft), (TargetMask::default(), mask));
        }
    }
    let divs = variants(AblationAxis::Divergences, &t, &d, &names).unwrap();
    let kinds: Vec<_> = divs
        .iter()
        .map(|v| v.recipe.stages[0].distill.divergence)
        .collect();
    assert_eq!(kinds, Divergence::ALL);
    assert!(variants(AblationAxis::TeacherSizes, &t, &d, &[]).is_err());
}

#[test]
fn unknown_axis_lists_the_valid_ones() {
    let msg = "widths".parse::<AblationAxis>().unwrap_err().to_string();
    for a in AblationAxis::ALL {
        assert!(msg.contains(a.as_str()), "{msg}");
    }
    assert_eq!(
        "teacher_sizes".parse::<AblationAxis>().unwrap(),
        AblationAxis::TeacherSizes
    );
}

#[test]
fn recipe_ablation_emits_a_ranked_row_per_cell() {
    let mut f = Fixture::new();
    f.train.pretrain_epochs = 1;
    f.train.finetune_epochs = 1;
    let teacher = f.teacher();
    let cells = variants(
        AblationAxis::Recipes,
        &f.train,
        &DistillConfig::default(),
        &[],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    let mut count = |_: &str, _: &EpochRecord| {
        seen += 1;
        Ok(())
    };
    let mut out = AblationOutputs {
        checkpoint_root: Some(dir.path()),
        on_epoch: Some(&mut count),
    };
    let table = run_ablation(
        AblationAxis::Recipes,
        &cells,
        &f.config(Role::Student, 8),
        &f.encoder,
        &[&teacher],
        f.ctx(),
        &[0],
        &mut out,
    )
    .unwrap();
    assert_eq!(seen, 4 * 2 + 2 * 3);
    assert_eq!(table.rows.len(), 6);
    let mut labels: Vec<_> = table.rows.iter().map(|r| r.label.as_str()).collect();
    labels.sort();
    let mut expected = RECIPE_SWEEP.to_vec();
    expected.sort();
    assert_eq!(labels, expected);
    for (i, w) in table.rows.windows(2).enumerate() {
        assert_eq!(w[0].rank, i + 1);
        assert!(w[0].mean_accuracy >= w[1].mean_accuracy);
    }
    let text = table.render();
    assert!(RECIPE_SWEEP.iter().all(|r| text.contains(r)));
    let back: AblationTable =
        serde_json::from_str(&serde_json::to_string(&table).unwrap()).unwrap();
    assert_eq!(back, table);
}
