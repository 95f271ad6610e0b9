mod common;

use common::{active_adapter, normal_tensor, small_config, small_model};
use proptest::prelude::*;
use tokensplit::adapters::{
    apply_merged, apply_token_wise, concept_loss, train_adapter, AdapterDb, AdapterSet, AdapterTrainConfig,
    ConceptAdapter, MergeMode, Variant,
};
use tokensplit::dataset::{gen_concept_set, ConceptSpec};
use tokensplit::model::SampleConfig;
use tokensplit::rng::SplitMix64;
use tokensplit::tensor::Tensor;
use tokensplit::Error;

fn rows_equal(a: &Tensor<f64>, b: &Tensor<f64>, row: usize) -> bool {
    a.row(row)
        .iter()
        .zip(b.row(row))
        .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn concept_images(spec: &ConceptSpec, count: usize) -> Vec<Tensor<f64>> {
    let cfg = small_config();
    gen_concept_set(spec, count, 1, cfg.height, cfg.width)
        .unwrap()
        .into_iter()
        .map(|c| c.canvas)
        .collect()
}

proptest! {
    #[test]
    fn token_wise_touches_only_bound_rows(seed in any::<u64>(), n in 2usize..12, pos in 0usize..12) {
        let pos = pos % n;
        let cfg = small_config();
        let a = active_adapter::<f64>(&cfg, "a", "square", Variant::Value, seed);
        let mut rng = SplitMix64::new(seed);
        let v = normal_tensor(&mut rng, &[n, cfg.value_dim], 1.0);
        let c = normal_tensor(&mut rng, &[n, cfg.text_dim], 1.0);
        let mut set = AdapterSet::token_wise();
        set.push(&a, pos);
        let out = apply_token_wise(&v, &set, &c, 1).unwrap();
        for row in (0..n).filter(|&r| r != pos) {
            prop_assert!(rows_equal(&v, &out, row));
        }
        // the bound row receives exactly the adapter's output for that row
        let delta = a.forward(1, &c.select_rows(&[pos]).unwrap()).unwrap();
        for (j, d) in delta.data().iter().enumerate() {
            prop_assert!((out.row(pos)[j] - v.row(pos)[j] - d).abs() < 1e-12);
        }
    }
}

#[test]
fn two_adapters_each_modify_their_own_row() {
    let cfg = small_config();
    let a = active_adapter::<f64>(&cfg, "a", "square", Variant::Value, 1);
    let b = active_adapter::<f64>(&cfg, "b", "circle", Variant::Value, 2);
    let mut rng = SplitMix64::new(3);
    let v = normal_tensor(&mut rng, &[6, cfg.value_dim], 1.0);
    let c = normal_tensor(&mut rng, &[6, cfg.text_dim], 1.0);
    let mut set = AdapterSet::token_wise();
    set.push(&a, 1).push(&b, 4);
    let out = apply_token_wise(&v, &set, &c, 0).unwrap();
    for row in 0..6 {
        assert_eq!(rows_equal(&v, &out, row), ![1, 4].contains(&row), "row {row}");
    }
}

#[test]
fn empty_set_is_identity() {
    let mut rng = SplitMix64::new(4);
    let v: Tensor<f64> = normal_tensor(&mut rng, &[5, 8], 1.0);
    let c: Tensor<f64> = normal_tensor(&mut rng, &[5, 8], 1.0);
    let set = AdapterSet::<f64>::token_wise();
    assert!(apply_token_wise(&v, &set, &c, 0).unwrap().bit_eq(&v));
    let set = AdapterSet::<f64>::merged();
    assert!(apply_merged(&v, &set, &c, 0).unwrap().bit_eq(&v));
}

#[test]
fn merged_mode_spreads_to_every_row() {
    let cfg = small_config();
    let a = active_adapter::<f64>(&cfg, "a", "square", Variant::Value, 1);
    let b = active_adapter::<f64>(&cfg, "b", "circle", Variant::Value, 2);
    let mut rng = SplitMix64::new(5);
    let v = normal_tensor(&mut rng, &[6, cfg.value_dim], 1.0);
    let c = normal_tensor(&mut rng, &[6, cfg.text_dim], 1.0);

    let mut single = AdapterSet::merged();
    single.push(&a, 2);
    let out = apply_merged(&v, &single, &c, 0).unwrap();
    let delta = a.forward(0, &c).unwrap();
    let expected = v.add(&delta).unwrap();
    assert!(out.max_abs_diff(&expected) < 1e-12);

    let mut zero = AdapterSet::merged();
    zero.push_weighted(&a, 2, 0.0).push_weighted(&b, 3, 0.0);
    assert!(apply_merged(&v, &zero, &c, 0).unwrap().bit_eq(&v));

    let mut both = AdapterSet::merged();
    both.push_weighted(&a, 2, 0.5).push_weighted(&b, 3, 2.0);
    let mut local = AdapterSet::token_wise();
    local.push(&a, 2).push(&b, 3);
    let mixed = apply_merged(&v, &both, &c, 1).unwrap();
    let routed = apply_token_wise(&v, &local, &c, 1).unwrap();
    let expected = v
        .add(&a.forward(1, &c).unwrap().scale(0.5))
        .unwrap()
        .add(&b.forward(1, &c).unwrap().scale(2.0))
        .unwrap();
    assert!(mixed.max_abs_diff(&expected) < 1e-12);
    assert!(!rows_equal(&v, &mixed, 0));
    assert!(rows_equal(&v, &routed, 0));
}

#[test]
fn hook_rejects_bad_bindings() {
    let model = small_model::<f64>(1);
    let cfg = &model.config;
    let a = active_adapter::<f64>(cfg, "a", "square", Variant::Value, 1);
    let b = active_adapter::<f64>(cfg, "b", "circle", Variant::Value, 2);
    let prompt = model.encode("a square and a circle").unwrap();
    let c = model.text_features(&prompt).unwrap();
    let z = Tensor::zeros(&cfg.latent_shape());

    let mut far = AdapterSet::token_wise();
    far.push(&a, cfg.max_tokens);
    assert!(matches!(
        model.predict(&z, &c, 0, Some(&far), None),
        Err(Error::Contract(_))
    ));

    let mut twice = AdapterSet::token_wise();
    twice.push(&a, 1).push(&b, 1);
    assert!(matches!(
        model.predict(&z, &c, 0, Some(&twice), None),
        Err(Error::Contract(_))
    ));

    let missing = active_adapter::<f64>(cfg, "t", "triangle", Variant::Value, 3);
    assert!(matches!(
        AdapterSet::for_prompt(MergeMode::TokenWise, &[&missing], &prompt),
        Err(Error::WordNotInPrompt { .. })
    ));
}

#[test]
fn value_adapters_leave_first_block_attention_unchanged() {
    let model = small_model::<f64>(2);
    let cfg = &model.config;
    let a = active_adapter::<f64>(cfg, "a", "square", Variant::Value, 1);
    let k = active_adapter::<f64>(cfg, "k", "square", Variant::Key, 1);
    let prompt = model.encode("a square and a circle").unwrap();
    let c = model.text_features(&prompt).unwrap();
    let z = normal_tensor(&mut SplitMix64::new(6), &cfg.latent_shape(), 1.0);
    let base = model.predict(&z, &c, 5, None, None).unwrap();

    let values = AdapterSet::for_prompt(MergeMode::TokenWise, &[&a], &prompt).unwrap();
    let with = model.predict(&z, &c, 5, Some(&values), None).unwrap();
    for (x, y) in base.cross_maps[0].iter().zip(&with.cross_maps[0]) {
        assert!(x.bit_eq(y));
    }
    assert!(!base.eps.bit_eq(&with.eps));

    let keys = AdapterSet::for_prompt(MergeMode::TokenWise, &[&k], &prompt).unwrap();
    let with = model.predict(&z, &c, 5, Some(&keys), None).unwrap();
    let moved = base.cross_maps[0]
        .iter()
        .zip(&with.cross_maps[0])
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max);
    assert!(moved > 1e-3, "key adapter moved attention by only {moved}");
}

#[test]
fn fresh_adapters_do_not_change_sampling() {
    let model = small_model::<f32>(3);
    let prompt = model.encode("a square and a circle").unwrap();
    let a = ConceptAdapter::fresh("a", "square", Variant::Value, 4, &model.config, 1);
    let b = ConceptAdapter::fresh("b", "circle", Variant::Value, 4, &model.config, 2);
    let set = AdapterSet::for_prompt(MergeMode::TokenWise, &[&a, &b], &prompt).unwrap();
    let cfg = SampleConfig {
        steps: 8,
        seed: 4,
        record_attention: true,
        ..Default::default()
    };
    let plain = model.sample(&prompt, None, &cfg).unwrap();
    let hooked = model.sample(&prompt, Some(&set), &cfg).unwrap();
    assert!(plain.latent.bit_eq(&hooked.latent));
    for (x, y) in plain.history.iter().zip(&hooked.history) {
        assert!(x.map.bit_eq(&y.map));
    }
}

#[test]
fn training_guards() {
    let model = small_model::<f32>(1);
    let images = concept_images(&ConceptSpec::checker(), 3);
    let key = AdapterTrainConfig {
        variant: Variant::Key,
        ..Default::default()
    };
    assert!(matches!(
        train_adapter(&model, &images, "c", "square", &key),
        Err(Error::AblationGuard(_))
    ));
    let allowed = AdapterTrainConfig {
        allow_ablation: true,
        iters: 1,
        ..key
    };
    assert!(train_adapter(&model, &images, "c", "square", &allowed).is_ok());
    assert!(matches!(
        train_adapter(&model, &images[..2], "c", "square", &AdapterTrainConfig::default()),
        Err(Error::Config { .. })
    ));
    assert!(matches!(
        train_adapter(&model, &images, "c", "purple", &AdapterTrainConfig::default()),
        Err(Error::OutOfVocabulary(_))
    ));
}

#[test]
fn zero_iterations_return_the_fresh_adapter() {
    let model = small_model::<f64>(1);
    let images = concept_images(&ConceptSpec::stripes(), 3);
    let cfg = AdapterTrainConfig {
        iters: 0,
        seed: 9,
        ..Default::default()
    };
    let (a, log) = train_adapter(&model, &images, "s", "circle", &cfg).unwrap();
    let fresh = ConceptAdapter::<f64>::fresh("s", "circle", Variant::Value, cfg.rank, &model.config, 9);
    assert_eq!(a.blocks, fresh.blocks);
    assert!(log.losses.is_empty());
    assert_eq!(log.initial_loss, log.final_loss);
}

#[test]
fn training_lowers_concept_loss_without_touching_the_base() {
    let model = small_model::<f32>(2);
    let before = model.clone();
    let images = concept_images(&ConceptSpec::checker(), 4);
    let cfg = AdapterTrainConfig {
        iters: 40,
        lr: 2e-2,
        ..Default::default()
    };
    let (a, log) = train_adapter(&model, &images, "c", "square", &cfg).unwrap();
    assert_eq!(log.losses.len(), 40);
    assert!(log.final_loss < log.initial_loss);
    assert_eq!(concept_loss(&model, &a, &images, cfg.seed).unwrap(), log.final_loss);
    assert_eq!(model, before);
    assert_eq!(a.info.iterations, 40);
}

#[test]
fn database_collisions_and_lookups() {
    let cfg = small_config();
    let mut db = AdapterDb::<f64>::new();
    db.insert(active_adapter(&cfg, "checker", "square", Variant::Value, 1), false)
        .unwrap();
    assert!(matches!(
        db.insert(active_adapter(&cfg, "checker", "circle", Variant::Value, 2), false),
        Err(Error::ConceptExists(_))
    ));
    db.insert(active_adapter(&cfg, "checker", "circle", Variant::Value, 2), true)
        .unwrap();
    assert_eq!(db.get("checker").unwrap().word, "circle");
    assert!(matches!(db.get("stripes"), Err(Error::ConceptMissing(_))));
    assert!(matches!(db.remove("stripes"), Err(Error::ConceptMissing(_))));
    db.remove("checker").unwrap();
    assert!(db.is_empty());
}
