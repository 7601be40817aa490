mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sentigen_core::losses::LossWeights;
use sentigen_core::remi::TokenSequence;
use sentigen_core::trainer::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_checked, parse_checkpoint, save_checkpoint, Corpus, LogRecord,
    PreparedData, TrainConfig, Trainer,
};
use sentigen_core::{EmotionClass, Error};

fn tiny(pretrain_steps: u64, adv_steps: u64) -> TrainConfig {
    TrainConfig {
        g_blocks: 1,
        g_d_model: 8,
        g_heads: 2,
        g_d_ff: 16,
        d_blocks: 1,
        d_d_model: 8,
        d_heads: 2,
        d_d_ff: 16,
        patch_len: 4,
        pretrain_seq_len: 16,
        adv_seq_len: 16,
        primer_len: 4,
        batch_size: 2,
        max_len: 32,
        lr: 1e-3,
        pretrain_steps,
        adv_steps,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn corpus(with_unlabeled: bool) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut seqs = common::register_corpus(&mut rng, 2, 2);
    if with_unlabeled {
        let mut extra = common::register_corpus(&mut rng, 1, 2);
        for s in &mut extra {
            s.label = EmotionClass::Unlabeled;
        }
        seqs.extend(extra);
    }
    Corpus::from_sequences(seqs)
}

fn run(config: &TrainConfig, data: &PreparedData) -> (Trainer, Vec<LogRecord>) {
    let mut t = Trainer::new(config.clone()).unwrap();
    let mut trace = Vec::new();
    t.pretrain(data, |r| trace.push(r.clone())).unwrap();
    t.adversarial_train(data, |r| trace.push(r.clone())).unwrap();
    (t, trace)
}

#[test]
fn same_seed_same_run() {
    let config = tiny(6, 4);
    let data = PreparedData::new(&corpus(true), &config).unwrap();
    let (a, ta) = run(&config, &data);
    let (b, tb) = run(&config, &data);
    assert_eq!(ta, tb);
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));

    let (c, tc) = run(&TrainConfig { seed: 12, ..config }, &data);
    assert_ne!(ta, tc);
    assert_ne!(checkpoint_bytes(&a), checkpoint_bytes(&c));
}

#[test]
fn resume_reproduces_the_next_steps() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(20, 14);
    let data = PreparedData::new(&corpus(true), &config).unwrap();
    let (full, trace) = run(&config, &data);

    for (pre, adv) in [(10, 0), (20, 4)] {
        let mut t = Trainer::new(config.clone()).unwrap();
        while t.pretrain_done < pre {
            t.pretrain_step(&data).unwrap();
        }
        while t.adv_done < adv {
            t.adversarial_step(&data).unwrap();
        }
        let path = dir.path().join(format!("k{pre}_{adv}.ckpt"));
        save_checkpoint(&t, &path).unwrap();
        drop(t);

        let mut resumed = load_checkpoint(&path).unwrap();
        let start = (pre + adv) as usize;
        let mut rest = Vec::new();
        for _ in 0..10 {
            let r = if resumed.pretrain_done < config.pretrain_steps {
                resumed.pretrain_step(&data)
            } else {
                resumed.adversarial_step(&data)
            };
            rest.push(r.unwrap());
        }
        assert_eq!(rest, trace[start..start + 10], "resume at {pre}/{adv}");
    }

    let path = dir.path().join("done.ckpt");
    save_checkpoint(&full, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint_bytes(&load_checkpoint(&path).unwrap()));
}

#[test]
fn checkpoint_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(2, 0);
    let data = PreparedData::new(&corpus(false), &config).unwrap();
    let (t, _) = run(&config, &data);
    let path = dir.path().join("t.ckpt");
    save_checkpoint(&t, &path).unwrap();
    assert!(load_checkpoint_checked(&path, &config).is_ok());
    let other = TrainConfig { lr: 2e-3, ..config.clone() };
    assert!(matches!(load_checkpoint_checked(&path, &other), Err(Error::Config(_)) | Err(Error::Checkpoint(_))));
    let bytes = std::fs::read(&path).unwrap();
    assert!(parse_checkpoint(&bytes[..bytes.len() - 1], None).is_err());
}

#[test]
fn mle_only_adversarial_matches_pretraining() {
    let config = TrainConfig { weights: LossWeights { alpha: 0.0, beta: 0.0, lambda: 10.0 }, ..tiny(8, 8) };
    let data = PreparedData::new(&corpus(false), &config).unwrap();
    assert!(data.unlabeled.is_empty());
    assert_eq!(data.labeled, data.adversarial);

    let mut pre = Trainer::new(config.clone()).unwrap();
    let mut adv = Trainer::new(config.clone()).unwrap();
    for _ in 0..8 {
        let a = pre.pretrain_step(&data).unwrap();
        let b = adv.adversarial_step_with(&data, 0).unwrap();
        assert_eq!(a.loss("mle"), b.loss("mle"));
    }
    for (a, b) in pre.generator.params.iter().zip(adv.generator.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn empty_corpus_is_rejected() {
    let config = tiny(2, 2);
    let data = PreparedData::new(&Corpus::from_sequences(Vec::<TokenSequence>::new()), &config).unwrap();
    let mut t = Trainer::new(config).unwrap();
    assert!(t.pretrain_step(&data).is_err());
    assert!(t.adversarial_step(&data).is_err());
}
