use std::path::Path;

use lidctc::corpus::{gen_corpus, gen_language_set, CorpusConfig, LanguageSetConfig};
use lidctc::harness::{train_on, Dataset, Run, TrainConfig, AVERAGED_CHECKPOINT, LOSS_FILE};
use lidctc::{ConditioningMode, EncoderConfig};

fn small_data() -> Dataset {
    let languages = gen_language_set(&LanguageSetConfig {
        n_langs: 3,
        n_confusable_pairs: 1,
        ..LanguageSetConfig::default()
    })
    .unwrap();
    let utterances = gen_corpus(
        &languages,
        &CorpusConfig {
            utterances_per_lang: 20,
            ..CorpusConfig::default()
        },
    )
    .unwrap();
    Dataset {
        languages,
        utterances,
    }
}

fn small_config(out: &Path, mode: ConditioningMode) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        warmup_steps: 20,
        encoder: EncoderConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ffn_dim: 16,
            tap_layers: vec![1],
            mode,
            ..EncoderConfig::default()
        },
        out_dir: out.to_path_buf(),
        evaluate: false,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let a = small_config(&dir.path().join("a"), ConditioningMode::HierLidTok);
    let b = small_config(&dir.path().join("b"), ConditioningMode::HierLidTok);
    train_on(&a, &data).unwrap();
    train_on(&b, &data).unwrap();
    let read = |p: &Path| std::fs::read_to_string(p.join(LOSS_FILE)).unwrap();
    assert_eq!(read(&a.out_dir), read(&b.out_dir));
    assert_eq!(
        std::fs::read(a.out_dir.join(AVERAGED_CHECKPOINT)).unwrap(),
        std::fs::read(b.out_dir.join(AVERAGED_CHECKPOINT)).unwrap()
    );
}

#[test]
fn training_reduces_the_loss() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), ConditioningMode::LidUtt);
    cfg.epochs = 6;
    let out = train_on(&cfg, &data).unwrap();
    assert!(out.first_loss.is_finite());
    assert!(
        out.last_epoch_loss < 0.8 * out.first_epoch_loss,
        "{} -> {}",
        out.first_epoch_loss,
        out.last_epoch_loss
    );
}

#[test]
fn keeps_best_checkpoints_and_reopens_run() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), ConditioningMode::ScCtc);
    cfg.evaluate = true;
    cfg.beam.beam = 2;
    let out = train_on(&cfg, &data).unwrap();
    assert_eq!(out.best_checkpoints.len(), 3);
    assert!(out.best_checkpoints.iter().all(|p| p.exists()));
    let report = out.report.unwrap();
    assert!((0.0..=1.0).contains(&report.lid_accuracy));

    let loss = std::fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap();
    let header = loss.lines().next().unwrap();
    assert_eq!(
        header,
        "step,epoch,lr,l_att,l_ctc_enc,l_lid,l_inter_1,l_total"
    );
    assert!(loss.lines().skip(1).all(|l| l.split(',').count() == 8));

    let run = Run::open(dir.path()).unwrap();
    assert_eq!(run.config.encoder.mode, ConditioningMode::ScCtc);
    assert_eq!(run.model.params.num_scalars(), {
        let avg = lidctc::Model::load(&dir.path().join(AVERAGED_CHECKPOINT)).unwrap();
        avg.params.num_scalars()
    });
}
