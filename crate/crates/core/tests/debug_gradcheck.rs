use std::collections::BTreeMap;
use vitadapt_core::backbone::{patchify_mask, Backbone, BackboneConfig};
use vitadapt_core::data::synth::{generate_split, SynthSpec, SynthTask};
use vitadapt_core::data::Split;
use vitadapt_core::tensor::{Tape, Tensor, Var};
use vitadapt_core::train::{bce_loss, randomize_for_gradcheck};
use vitadapt_core::variants::{build_variant, freeze_backbone, PeftModel, VariantKind, VariantSpec};

fn batch_loss_var(model: &PeftModel, tape: &mut Tape, batch: &[vitadapt_core::data::Sample]) -> (Var, Vec<(String, Var)>) {
    let vars = model.bind(tape);
    let mut total: Option<Var> = None;
    for sample in batch {
        let logits = model.forward_bound(tape, &vars, &sample.image).unwrap();
        let targets = patchify_mask(&sample.mask, model.config()).unwrap();
        let loss = bce_loss(tape, logits, &targets).unwrap();
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss).unwrap(),
        });
    }
    let sum = total.unwrap();
    let mean = tape.mul_scalar(sum, 1.0 / batch.len() as f64);
    (mean, vars.bindings)
}

fn batch_loss_value(model: &PeftModel, batch: &[vitadapt_core::data::Sample]) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = batch_loss_var(model, &mut tape, batch);
    tape.value(loss)[0]
}

#[test]
fn replicate_impl() {
    let spec = SynthSpec {
        task: SynthTask::Camouflage,
        size: 16,
        n_train: 2,
        n_test: 1,
        seed: 12,
        ..Default::default()
    };
    let train_set = generate_split(&spec, Split::Train);
    let batch = &train_set[..2];
    let backbone = Backbone::new(BackboneConfig::gradcheck(), 16).unwrap();
    let mut model = build_variant(backbone, VariantSpec::with_kind(VariantKind::Series), 16).unwrap();
    freeze_backbone(&mut model);
    randomize_for_gradcheck(&mut model, 99);

    let trainable: Vec<(String, Tensor)> = model
        .trainable_params()
        .into_iter()
        .map(|(p, t)| (p, t.clone()))
        .collect();

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let (loss, bindings) = batch_loss_var(&model, &mut tape, batch);
        let mut grads = tape.backward(loss).unwrap();
        let by_path: BTreeMap<String, Var> = bindings.into_iter().collect();
        trainable.iter().map(|(p, _)| grads.take(by_path[p])).collect()
    };

    let work = std::cell::RefCell::new(model.clone());
    let mut worst = (0.0f64, String::new(), 0usize, 0.0, 0.0);
    let mut probe: Vec<Tensor> = trainable.iter().map(|(_, t)| t.clone()).collect();
    for p in 0..probe.len() {
        for j in 0..probe[p].numel() {
            let orig = probe[p].data()[j];
            let mut eval = |ps: &Vec<Tensor>| -> f64 {
                let mut m = work.borrow_mut();
                for ((_, slot), src) in m.trainable_params_mut().into_iter().zip(ps) {
                    slot.data_mut().copy_from_slice(src.data());
                }
                batch_loss_value(&m, batch)
            };
            probe[p].data_mut()[j] = orig + 1e-5;
            let plus = eval(&probe);
            probe[p].data_mut()[j] = orig - 1e-5;
            let minus = eval(&probe);
            probe[p].data_mut()[j] = orig;
            let numeric = (plus - minus) / 2e-5;
            let a = analytic[p][j];
            let err = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if err > worst.0 {
                worst = (err, trainable[p].0.clone(), j, a, numeric);
            }
        }
    }
    println!(
        "worst: err {:.3e} at {}[{}] analytic {:.9e} numeric {:.9e}",
        worst.0, worst.1, worst.2, worst.3, worst.4
    );
}
