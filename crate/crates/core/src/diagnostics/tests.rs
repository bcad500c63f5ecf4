use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::backbone::{BackboneWeights, BlockTrace, ForwardTrace, ViTConfig};
use crate::error::LsptError;
use crate::prompts::{lspt_forward, PromptBank, StrategyKind};

fn softmax_rows(t: usize, rows: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw = Tensor::<f64>::uniform(&[rows, t], -3.0, 3.0, rng);
    raw.data()
        .chunks(t)
        .flat_map(|r| {
            let s: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(move |v| v.exp() / s)
        })
        .collect()
}

fn random_trace(np: usize, n: usize, heads: usize, blocks: usize, seed: u64) -> ForwardTrace<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    let t = 1 + np + n;
    ForwardTrace {
        num_prompts: np,
        num_patches: n,
        heads,
        blocks: (0..blocks)
            .map(|l| BlockTrace {
                class_tok: Tensor::uniform(&[1, d], -1.0, 1.0, &mut rng),
                prompt_toks: Tensor::uniform(&[np, d], -1.0, 1.0, &mut rng),
                patch_toks: Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng),
                attention: Tensor::new(vec![heads, t, t], softmax_rows(t, heads * t, &mut rng)).unwrap(),
                next_prompts: (l + 1 < blocks).then(|| Tensor::uniform(&[np, d], -1.0, 1.0, &mut rng)),
            })
            .collect(),
    }
}

fn meta(grid: (usize, usize)) -> ReportMeta {
    ReportMeta {
        strategy: StrategyKind::Lspt,
        seed: 7,
        sample: 3,
        grid,
    }
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[test]
fn cosine_of_identical_orthogonal_and_zero_vectors() {
    assert!((cosine(&[1.0, 2.0, -3.0], &[1.0, 2.0, -3.0]) - 1.0f64).abs() < 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 5.0]), 0.0f64);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0f64);
    assert!((cosine(&[1.0, 1.0], &[-2.0, -2.0]) + 1.0f64).abs() < 1e-15);
}

#[test]
fn cosine_maps_match_double_loop_oracle() {
    for seed in 0..10 {
        let trace = random_trace(3, 4, 2, 3, seed);
        let maps = prompt_patch_cosine(&trace).unwrap();
        assert_eq!(maps.len(), 3);
        for (l, (map, b)) in maps.iter().zip(&trace.blocks).enumerate() {
            let prompts = b.next_prompts.as_ref().unwrap_or(&b.prompt_toks);
            assert_eq!(b.next_prompts.is_none(), l == 2);
            for i in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += naive_cos(prompts.row(k), b.patch_toks.row(i));
                }
                assert!((map.data()[i] - s / 3.0).abs() <= 1e-12);
                assert!((-1.0..=1.0).contains(&map.data()[i]));
            }
        }
    }
}

#[test]
fn prompt_equal_to_patch_contributes_one() {
    let mut trace = random_trace(1, 4, 1, 1, 2);
    let patch = trace.blocks[0].patch_toks.row(2).to_vec();
    trace.blocks[0].prompt_toks = Tensor::new(vec![1, patch.len()], patch).unwrap();
    let map = &prompt_patch_cosine(&trace).unwrap()[0];
    assert!((map.data()[2] - 1.0).abs() < 1e-15);
}

#[test]
fn cosine_needs_prompts() {
    let trace = random_trace(0, 4, 1, 2, 0);
    assert!(matches!(prompt_patch_cosine(&trace), Err(LsptError::Contract(_))));
}

#[test]
fn attention_maps_match_manual_extraction() {
    for seed in 0..10 {
        let (np, n, heads) = (2, 9, 3);
        let t = 1 + np + n;
        let trace = random_trace(np, n, heads, 2, seed);
        for l in 1..=2 {
            let map = class_attention_map(&trace, l).unwrap();
            let a = &trace.blocks[l - 1].attention;
            let mut expect = vec![0.0; n];
            for h in 0..heads {
                for j in 0..n {
                    expect[j] += a.data()[h * t * t + 1 + np + j] / heads as f64;
                }
            }
            let s: f64 = expect.iter().sum();
            for j in 0..n {
                assert!((map.data()[j] - expect[j] / s).abs() <= 1e-12);
            }
            assert!((map.data().iter().sum::<f64>() - 1.0).abs() <= 1e-9);

            let pmap = prompt_attention_map(&trace, l).unwrap();
            let mut expect = vec![0.0; n];
            for h in 0..heads {
                for q in 1..=np {
                    for j in 0..n {
                        expect[j] += a.data()[(h * t + q) * t + 1 + np + j];
                    }
                }
            }
            let s: f64 = expect.iter().sum();
            for j in 0..n {
                assert!((pmap.data()[j] - expect[j] / s).abs() <= 1e-12);
            }
        }
        assert!(class_attention_map(&trace, 0).is_err());
        assert!(class_attention_map(&trace, 3).is_err());
    }
}

#[test]
fn uniform_attention_gives_uniform_map() {
    let mut trace = random_trace(2, 4, 2, 1, 0);
    let t = 7;
    trace.blocks[0].attention = Tensor::new(vec![2, t, t], vec![1.0 / t as f64; 2 * t * t]).unwrap();
    let map = class_attention_map(&trace, 1).unwrap();
    for &v in map.data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn retention_examples_and_errors() {
    let mask = [true, false, false, true];
    let uniform = Tensor::new(vec![4], vec![0.3; 4]).unwrap();
    assert_eq!(retention_score(&uniform, &mask).unwrap(), 0.0);
    let on_mask = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(retention_score(&on_mask, &mask).unwrap(), 1.0);
    assert!(matches!(retention_score(&uniform, &[false; 4]), Err(LsptError::Contract(_))));
    assert!(matches!(retention_score(&uniform, &[true; 4]), Err(LsptError::Contract(_))));
    assert!(retention_score(&uniform, &[true; 3]).is_err());
}

#[test]
fn reports_are_pure_and_carry_retention() {
    let trace = random_trace(2, 4, 2, 3, 5);
    let mask = [false, true, false, false];
    let a = DiagnosticsReport::build(&trace, Some(&mask), meta((2, 2))).unwrap();
    let b = DiagnosticsReport::build(&trace, Some(&mask), meta((2, 2))).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.retention.len(), 3);
    assert_eq!(a.retention, retention_curve(&a, &mask).unwrap());
    assert!(DiagnosticsReport::build(&trace, None, meta((2, 2))).unwrap().retention.is_empty());
    assert!(DiagnosticsReport::build(&trace, None, meta((3, 2))).is_err());
}

#[test]
fn graymap_layout_scaling_and_constant_rule() {
    let map = Tensor::new(vec![16], (0..16).map(f64::from).collect()).unwrap();
    let (pgm, (lo, hi)) = to_graymap(&map, (4, 4)).unwrap();
    let header = b"P5\n4 4\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let px = &pgm[header.len()..];
    assert_eq!(px.len(), 16);
    assert_eq!((px[0], px[15], px[5]), (0, 255, 85));
    assert_eq!((lo, hi), (0.0, 15.0));

    let flat = Tensor::new(vec![6], vec![-0.4; 6]).unwrap();
    let (pgm, _) = to_graymap(&flat, (2, 3)).unwrap();
    assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
    assert!(pgm[pgm.len() - 6..].iter().all(|&p| p == GRAYMAP_MIDPOINT));
    assert!(to_graymap(&flat, (2, 2)).is_err());
}

#[test]
fn export_writes_round_trippable_files() {
    let trace = random_trace(2, 16, 2, 2, 9);
    let mut mask = [false; 16];
    mask[0] = true;
    mask[15] = true;
    let report = DiagnosticsReport::build(&trace, Some(&mask), meta((4, 4))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export_report(&report, dir.path()).unwrap();
    assert_eq!(files.len(), 2 * 2 * 2 + 3);
    for (l, map) in report.cosine_maps.iter().enumerate() {
        let back = read_map_csv(&dir.path().join(format!("cosine_block{}.csv", l + 1))).unwrap();
        assert_eq!(back.len(), 16);
        for (a, b) in back.iter().zip(map.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let pgm = std::fs::read(dir.path().join(format!("attn_block{}.pgm", l + 1))).unwrap();
        assert_eq!(pgm.len(), b"P5\n4 4\n255\n".len() + 16);
    }
    let index = std::fs::read_to_string(dir.path().join("index.txt")).unwrap();
    assert!(index.contains("strategy=lspt\n"));
    assert!(index.contains("seed=7\n"));
    assert!(index.contains("file=ranges.csv\n"));
    let ranges = std::fs::read_to_string(dir.path().join("ranges.csv")).unwrap();
    assert_eq!(ranges.lines().count(), 1 + 4);
    let retention = std::fs::read_to_string(dir.path().join("retention.csv")).unwrap();
    assert_eq!(retention.lines().count(), 1 + 2);
}

#[test]
fn read_map_csv_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    std::fs::write(&p, "patch,value\n0,1.5\n2,3\n").unwrap();
    assert!(matches!(read_map_csv(&p), Err(LsptError::Format { .. })));
    std::fs::write(&p, "x\n").unwrap();
    assert!(read_map_csv(&p).is_err());
    assert!(matches!(read_map_csv(&dir.path().join("missing.csv")), Err(LsptError::Io { .. })));
}

#[test]
fn maps_from_a_real_forward_are_valid() {
    let c = ViTConfig::micro();
    let backbone = BackboneWeights::<f64>::init(c, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = Tensor::uniform(&[3, 32, 32], -1.0, 1.0, &mut rng);
    for s in [StrategyKind::Lspt, StrategyKind::VptDeep, StrategyKind::LsptTransformer] {
        let bank = PromptBank::init(s, &c, 4, 3).unwrap();
        let (_, trace) = lspt_forward(&image, &backbone, &bank, s).unwrap();
        let report = DiagnosticsReport::build(&trace, None, meta((4, 4))).unwrap();
        assert_eq!(report.cosine_maps.len(), 6);
        for m in &report.cosine_maps {
            assert!(m.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for m in &report.attn_maps {
            assert!(m.data().iter().all(|&v| v >= 0.0));
            assert!((m.data().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
