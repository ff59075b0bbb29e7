//! Frozen logits of seeded models. Regenerate with `MIXGROW_BLESS=1` after an
//! intentional numerical change.

use std::path::PathBuf;

use mixgrow::growth::{grow, GrowthPlan};
use mixgrow::network::{build_model, Mode, Model, NetworkSpec};
use mixgrow::numerics::Tensor;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_logits.txt")
}

fn logits() -> Vec<(String, Vec<u32>)> {
    let x = Tensor::from_fn(&[3, 1, 8, 8], |i| ((i as f32) * 0.731).sin());
    let spec = NetworkSpec::preset("cnn-mnist", [1, 8, 8], 4).unwrap();
    let a: Model<f32> = build_model(&spec, 2, 42).unwrap();
    let b: Model<f32> = build_model(&spec, 2, 43).unwrap();
    let grown = grow(&a, Some(&b), &GrowthPlan::default(), 44).unwrap();
    let wrn = NetworkSpec::preset("wrn-mini-cifar", [3, 8, 8], 4).unwrap();
    let w: Model<f32> = build_model(&wrn, 2, 45).unwrap();
    let xw = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i as f32) * 0.173).cos());
    let bits = |t: Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    vec![
        ("cnn-small".into(), bits(a.forward(&x, Mode::Eval, &[]).unwrap().logits)),
        ("cnn-grown".into(), bits(grown.forward(&x, Mode::Eval, &[]).unwrap().logits)),
        ("wrn-small".into(), bits(w.forward(&xw, Mode::Eval, &[]).unwrap().logits)),
    ]
}

fn render(rows: &[(String, Vec<u32>)]) -> String {
    rows.iter()
        .map(|(name, bits)| {
            let hex: Vec<String> = bits.iter().map(|b| format!("{b:08x}")).collect();
            format!("{name} {}\n", hex.join(" "))
        })
        .collect()
}

#[test]
fn logits_match_frozen_bits() {
    let current = render(&logits());
    if std::env::var_os("MIXGROW_BLESS").is_some() {
        std::fs::write(fixture(), &current).unwrap();
    }
    let frozen = std::fs::read_to_string(fixture()).expect("missing fixture; run with MIXGROW_BLESS=1");
    for (want, got) in frozen.lines().zip(current.lines()) {
        assert_eq!(want, got);
    }
    assert_eq!(frozen.lines().count(), current.lines().count());
}
