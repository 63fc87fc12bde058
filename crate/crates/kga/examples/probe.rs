use kga::data::*;
use kga::eval::*;
use kga::models::*;
use kga::unlearn::*;
use kga::util::derive_seed as ds;
use std::sync::Arc;
use std::time::Instant;

fn main() {
    for seed in [201u64, 202, 203] {
        let gen = SynthTransCfg { vocab: 50, count: 2500, min_len: 3, max_len: 10, swap_pairs: true, id_prefix: "d".into() };
        let train = synth_translation(&gen, ds(seed, "train", 0)).unwrap();
        let test = synth_translation(&SynthTransCfg { count: 300, id_prefix: "t".into(), ..gen.clone() }, ds(seed, "test", 0)).unwrap();
        let pool = synth_translation(&SynthTransCfg { count: 300, id_prefix: "n".into(), ..gen.clone() }, ds(seed, "pool", 0)).unwrap();
        let split = partition(&train, &ForgetSpec::RandomCount { count: 100 }, None, &pool, seed).unwrap();
        let vocab = Arc::new(Vocabulary::from_corpora(&[&split.full, &pool], 1));
        let spec = ModelSpec::Recurrent { embed: 16, hidden: 32 };
        let tcfg = TrainConfig { batch_size: 16, rate: 3e-2, warmup: 50, max_steps: 2500 };
        let t0 = Instant::now();
        let (orig, _) = train_supervised(&spec, &vocab, &split.full, &tcfg, ds(seed, "t", 0)).unwrap();
        let t_train = t0.elapsed().as_secs_f64();
        let (oracle, _) = retrain(&split, &spec, &vocab, &tcfg, ds(seed, "r", 0)).unwrap();
        let pdlp_f = pdlp(&oracle, &orig, &split.forget).unwrap();
        let pdlp_t = pdlp(&oracle, &orig, &test).unwrap();
        println!("seed {seed}: t_train={t_train:.1}s PPL(test) O={:.2} R={:.2} PPL(f) O={:.2} R={:.2} | PDLP f={pdlp_f:.1} t={pdlp_t:.1}",
            corpus_perplexity(&orig, &test).unwrap(), corpus_perplexity(&oracle, &test).unwrap(),
            corpus_perplexity(&orig, &split.forget).unwrap(), corpus_perplexity(&oracle, &split.forget).unwrap());

        let hcfg = HelperConfig { train: TrainConfig { batch_size: 16, rate: 2e-2, warmup: 30, max_steps: 400 }, augment: true, augment_fraction: 0.1 };
        let ucfg = UnlearnConfig { alpha: 0.1, sigma: 0.1, rate: 2e-3, batch_size: 16, max_step: 800, inner_step: 1, valid_step: 10, warmup: 30, seed: ds(seed, "u", 0) };
        let run = kga_run(&orig, &split, &spec, &vocab, &hcfg, &ucfg).unwrap();
        let pdlp_k = pdlp(&run.model, &orig, &split.forget).unwrap();
        println!("  kga: {:?}@{} G={:.3} G*={:.4} | PDLP(K)f={pdlp_k:.1} want within 15 of {pdlp_f:.1}",
            run.report.termination, run.report.steps_taken, run.report.initial_gap, run.report.final_gap);

        // translation MIA
        let mia_cfg = MiaConfig { shadow_train: TrainConfig { max_steps: 750, ..tcfg }, attack_steps: 3000, attack_rate: 1e-2, seed: ds(seed, "m", 0), ..Default::default() };
        let attacker = kga::harness::build_attacker(&split.full, &spec, &vocab, &mia_cfg).unwrap();
        let nm = kga::harness::attack_nonmembers(&test, 100, ds(seed, "me", 0)).unwrap();
        let f = |m: &dyn OutputModel| evaluate_attack(&attacker, m, &split.forget, &nm, 5).unwrap().f1;
        let (fo, fr, fk) = (f(&orig), f(&oracle), f(&run.model));
        println!("  MIA F1: o={fo:.3} r={fr:.3} k={fk:.3} dir={} close={}", fo > fr && fo > fk, (fk - fr).abs() < (fo - fr).abs());
    }
}
