// scratch: verify both effects on the twin benchmark
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sscnn_core::data::{synthesize_sample, InputMode, SampleRecord, SyntheticSceneSpec};
use sscnn_core::graph::{build_sscnn, downsample_supervision, tiny_preset};
use sscnn_core::layers::Mode;
use sscnn_core::metrics::{accumulate_label_confusion, accumulate_pixel_confusion, argmax, mean_class_accuracy, scene_confusion, ConfusionMatrix};
use sscnn_core::refine::{build_refinement_matrix, count_cooccurrence, refined_argmax_map};
use sscnn_core::trainer::{train, TrainConfig};
use std::time::Instant;

fn make(spec: &SyntheticSceneSpec, count: usize, rng: &mut ChaCha8Rng) -> Vec<SampleRecord> {
    (0..count)
        .map(|_| synthesize_sample(spec, rng).unwrap()
            .into_record(InputMode::Rgb, &spec.intrinsics(), &Default::default()).unwrap())
        .collect()
}

fn main() {
    let t0 = Instant::now();
    // Part 1: regularization gap over 5 seeds, n in {0, 2, 4}.
    let mut sums = [0.0f64; 3];
    for seed in [1u64, 2, 3, 4, 5] {
        let spec = SyntheticSceneSpec::benchmark(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let train_set = make(&spec, 64, &mut rng);
        let test_set = make(&spec, 128, &mut rng);
        let mut row = format!("seed={seed}:");
        for (i, n) in [0usize, 2, 4].iter().enumerate() {
            let preset = tiny_preset(3, spec.num_scenes, spec.num_objects, *n);
            let mut model = build_sscnn(&preset, seed).unwrap();
            let config = TrainConfig::tiny(seed);
            train(&mut model, &train_set, &config, None).unwrap();
            let (preds, labels): (Vec<_>, Vec<_>) = test_set.iter().map(|s| {
                let r = model.forward(s, Mode::Eval).unwrap();
                (argmax(r.p_s.data()), s.scene)
            }).unzip();
            let cm = scene_confusion(&preds, &labels, spec.num_scenes).unwrap();
            let acc = mean_class_accuracy(&cm).unwrap().mean;
            sums[i] += acc;
            row.push_str(&format!(" n{}={:.3}", n, acc));
        }
        println!("{row} [{:.0}s]", t0.elapsed().as_secs_f32());
    }
    println!("AVG: n0={:.3} n2={:.3} n4={:.3} gap={:+.1}pts",
        sums[0]/5.0, sums[1]/5.0, sums[2]/5.0, ((sums[1]/5.0).max(sums[2]/5.0) - sums[0]/5.0)*100.0);

    // Part 2: refinement effect, under-trained branch.
    for (epochs, n) in [(8usize, 2usize), (8, 4)] {
        let mut sum_unref = 0.0;
        let mut sum_ref = 0.0;
        for seed in [1u64, 2, 3, 4, 5] {
            let spec = SyntheticSceneSpec::benchmark(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let train_set = make(&spec, 64, &mut rng);
            let test_set = make(&spec, 128, &mut rng);
            let preset = tiny_preset(3, spec.num_scenes, spec.num_objects, n);
            let mut model = build_sscnn(&preset, seed).unwrap();
            let mut config = TrainConfig::tiny(seed);
            config.epochs = epochs;
            train(&mut model, &train_set, &config, None).unwrap();
            let counts = count_cooccurrence(
                train_set.iter().map(|s| (s.scene, &s.labels, &s.mask)),
                spec.num_scenes, spec.num_objects).unwrap();
            let matrix = build_refinement_matrix(&counts).unwrap();
            let (sh, sw) = model.seg_output_size();
            let mut cm_unref = ConfusionMatrix::new(spec.num_objects);
            let mut cm_ref = ConfusionMatrix::new(spec.num_objects);
            for s in &test_set {
                let r = model.forward(s, Mode::Eval).unwrap();
                let (lds, mds) = downsample_supervision(&s.labels, &s.mask, sh, sw).unwrap();
                accumulate_pixel_confusion(&mut cm_unref, &r.p_o, &lds, &mds).unwrap();
                let refined = refined_argmax_map(&r.p_s, &matrix, &r.p_o).unwrap();
                accumulate_label_confusion(&mut cm_ref, &refined, &lds, &mds).unwrap();
            }
            sum_unref += mean_class_accuracy(&cm_unref).unwrap().mean;
            sum_ref += mean_class_accuracy(&cm_ref).unwrap().mean;
        }
        println!("refine epochs={epochs} n={n}: unrefined={:.3} refined={:.3} delta={:+.1}pts [{:.0}s]",
            sum_unref/5.0, sum_ref/5.0, (sum_ref - sum_unref)/5.0*100.0, t0.elapsed().as_secs_f32());
    }
}
