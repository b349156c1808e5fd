use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skilledit_core::kinematics::{compute_signal, locate_span, select_peak, span_with_length};
use skilledit_core::{KinematicSignalSpec, MotionClip, PoseFrame, SignalKind, Skeleton};
use skilledit_model::{
    edit_motion, EditOptions, InfillMode, Infiller, InfillerConfig, ModelError, TokenSequence, Tokenizer, TokenizerConfig,
};

fn clip(seed: u64) -> MotionClip<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random::<f64>() * 6.0;
    let frames = (0..16)
        .map(|t| {
            let s = t as f64 / 15.0;
            let mut f = PoseFrame::zeros(8);
            let lift = (-((t as f64 - 8.0) / 1.5).powi(2)).exp() * 0.4;
            f.root_translation = [0.0, 0.9 + lift, 2.5 * s];
            f.root_orientation = [0.0, 0.05 * (phase + s).sin(), 0.0];
            for (i, x) in f.joint_rotations.iter_mut().enumerate() {
                *x = 0.3 * (phase + 0.7 * i as f64 + 4.0 * s).sin();
            }
            f
        })
        .collect();
    MotionClip::new(30.0, 8, frames).unwrap()
}

fn tok_config() -> TokenizerConfig {
    TokenizerConfig {
        codes_per_book: 16,
        latent_dim: 16,
        model_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        hidden_dim: 32,
        max_seq_len: 16,
        batch_size: 8,
        epochs: 4,
        ..TokenizerConfig::desk()
    }
}

fn inf_config() -> InfillerConfig {
    InfillerConfig {
        layers: 1,
        heads: 2,
        model_dim: 16,
        hidden_dim: 32,
        max_seq_len: 16,
        dropout: 0.0,
        batch_size: 8,
        epochs: 4,
        ..InfillerConfig::desk()
    }
}

fn signal() -> KinematicSignalSpec {
    KinematicSignalSpec::new(SignalKind::VerticalRootVelocity)
}

fn models(technique_b: &str) -> (Tokenizer, Infiller, Skeleton<f64>) {
    let corpus: Vec<_> = (0..16).map(clip).collect();
    let sk = Skeleton::default_humanoid();
    let (tok, _) = Tokenizer::train(&corpus, &tok_config(), "jump", 1).unwrap();
    let seqs: Vec<TokenSequence> = corpus.iter().map(|c| tok.tokenize(c).unwrap()).collect();
    let peaks: Vec<usize> = corpus
        .iter()
        .map(|c| select_peak(&compute_signal(c, &sk, &signal()).unwrap()).unwrap())
        .collect();
    let (inf, _) = Infiller::train(&seqs, &peaks, 2, 16, &inf_config(), technique_b, 2).unwrap();
    (tok, inf, sk)
}

#[test]
fn edits_touch_only_span_joint_rotations() {
    let (tok, inf, sk) = models("jump");
    let novice = clip(99);
    for crossfade in [true, false] {
        let opts = EditOptions { seed: 7, crossfade, ..EditOptions::new(signal()) };
        let res = edit_motion(&novice, &tok, &inf, &sk, &opts).unwrap();
        assert_eq!(res.clips.len(), 3);
        assert_eq!(res.modes[0], InfillMode::Greedy);
        assert_eq!(res.modes[1], InfillMode::Sample { temperature: 1.0 });
        assert_eq!(res.span, locate_span(&novice, &sk, &signal(), 0.15).unwrap());
        assert_eq!(res.span.width(), 3);
        for edited in &res.clips {
            assert_eq!((edited.len(), edited.num_joints), (novice.len(), novice.num_joints));
            for t in 0..novice.len() {
                let (a, b) = (&edited.frames[t], &novice.frames[t]);
                assert_eq!(a.root_translation, b.root_translation);
                assert_eq!(a.root_orientation, b.root_orientation);
                if !res.span.contains(t) {
                    assert_eq!(a, b);
                }
            }
        }
        let again = edit_motion(&novice, &tok, &inf, &sk, &opts).unwrap();
        assert_eq!(again, res);
    }
}

#[test]
fn mismatched_techniques_are_rejected() {
    let (tok, inf, sk) = models("squat");
    let err = edit_motion(&clip(3), &tok, &inf, &sk, &EditOptions::new(signal())).unwrap_err();
    assert!(matches!(err, ModelError::Config(_)), "{err}");
}

#[test]
fn infill_uses_future_context() {
    // the masked frames repeat a value that only the frames after the span reveal
    let make = |k: usize| TokenSequence {
        clip_id: format!("s{k}"),
        tokens: (0..10).map(|t| if t == 0 { vec![0, 0] } else { vec![k, k] }).collect(),
        span: None,
    };
    let corpus: Vec<_> = (1..4).flat_map(|k| std::iter::repeat_n(make(k), 4)).collect();
    let cfg = InfillerConfig { max_seq_len: 10, epochs: 150, lr: 1e-2, ..inf_config() };
    let (m, _) = Infiller::train(&corpus, &vec![2; corpus.len()], 2, 4, &cfg, "toy", 3).unwrap();
    let span = span_with_length(2, 10, 3).unwrap();
    let mut a = make(1).tokens;
    assert_eq!(m.infill(&a, &span, InfillMode::Greedy, 0).unwrap()[2], vec![1, 1]);
    for t in 4..10 {
        a[t] = vec![3, 3];
    }
    assert_eq!(m.infill(&a, &span, InfillMode::Greedy, 0).unwrap()[2], vec![3, 3]);
}
