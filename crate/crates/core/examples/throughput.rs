//! Training throughput on random data shaped like the prepared MovieLens set.

use std::time::Instant;

use hamur_core::adapter::NormConfig;
use hamur_core::backbone::{BackboneKind, BackboneSpec};
use hamur_core::data::{batches, Dataset, DatasetSpec, FieldSpec};
use hamur_core::model::{AdapterConfig, HamurModel, HyperConfig, ModelConfig, Sharing};
use hamur_core::optim::{AdamConfig, AdamState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> hamur_core::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50_000);
    let vocabs = [6041, 3, 8, 22, 3440, 680, 11, 3707, 19];
    let spec = DatasetSpec {
        num_domains: 3,
        fields: vocabs
            .iter()
            .enumerate()
            .map(|(i, &v)| FieldSpec { name: format!("f{i}"), vocab: v })
            .collect(),
        domain_rule: None,
        label_rule: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let features = (0..n).flat_map(|_| vocabs.map(|v| rng.gen_range(1..v as u32))).collect::<Vec<_>>();
    let domains = (0..n).map(|_| rng.gen_range(1..=3)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let ds = Dataset::new(spec.clone(), features, domains, labels)?;
    for enabled in [false, true] {
        let config = ModelConfig {
            num_domains: 3,
            fields: spec.fields.clone(),
            embedding_dim: 16,
            domain_feature: true,
            sharing: Sharing::PerDomain,
            backbone: BackboneSpec { kind: BackboneKind::Mlp, hidden: vec![256, 128], cross_layers: 0 },
            adapter: AdapterConfig { enabled, bottleneck: 32, sites: vec![1], norm: NormConfig::default() },
            hyper: HyperConfig { hidden: 64, rank: 35 },
        };
        let mut model = HamurModel::new(config, 1)?;
        let mut adam = AdamState::new(AdamConfig::default(), &model.store);
        let t = Instant::now();
        for b in batches(&ds, 2048, 1, 1)? {
            model.train_step(&b, &mut adam)?;
        }
        let secs = t.elapsed().as_secs_f64();
        println!(
            "adapters={enabled}: {n} instances in {secs:.2}s, {:.0} inst/s, 800k epoch ≈ {:.0}s",
            n as f64 / secs,
            800_000.0 * secs / n as f64
        );
    }
    Ok(())
}
