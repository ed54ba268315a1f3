// scratch probe: scheme-S embedding quality + extraction-attack retention
use std::time::Instant;

use tokenmark::attacks::{attack_extract, ModelOracle};
use tokenmark::data::{random_sequences, DatasetConfig, SyntheticDataset};
use tokenmark::permutation::PermutationFamily;
use tokenmark::rng::SeedHub;
use tokenmark::train::{train_classifier, TrainConfig};
use tokenmark::transformer::{ModelConfig, Reduction, TaskHead, TransformerWeights};
use tokenmark::watermark::scheme_b::mean_feature_similarity;
use tokenmark::watermark::scheme_s::{embed_s, extract_s_with_spec, sample_wrong_spec, BundleS, EmbedConfigS};
use tokenmark::watermark::{Provenance, SampleScore};

fn sims(report: &tokenmark::watermark::WrReport) -> Vec<f32> {
    report
        .samples
        .iter()
        .map(|s| match s {
            SampleScore::Similarity { sim, .. } => *sim,
            _ => unreachable!(),
        })
        .collect()
}

fn main() {
    let hub = SeedHub::new(42);
    let cfg = ModelConfig::toy();
    let ds_cfg = DatasetConfig::toy();
    let weights = TransformerWeights::random_init(cfg, &mut hub.stream("model.init"));
    let head = TaskHead::linear("head.ds", cfg.d, 10, Reduction::FirstToken, &mut hub.stream("model.head"));
    let data = SyntheticDataset::generate(ds_cfg, 2048, &mut hub.stream("data.train"));
    train_classifier(&weights, &head, &data, &TrainConfig { steps: 800, batch: 32, lr: 1e-3 }, None, &mut hub.stream("train")).unwrap();

    let extract_set = random_sequences(200, 16, 64, &mut hub.stream("set.extract"));

    let eval_ds = SyntheticDataset::generate(ds_cfg, 128, &mut hub.stream("data.eval2"));
    let eval_tokens: Vec<Vec<u16>> = eval_ds.samples.iter().map(|s| s.tokens.clone()).collect();
    for (label, embed_cfg, bseed) in [
        ("r0 s7", EmbedConfigS { shadow_restart_every: 0, shadow_ready_loss: -0.85, ..EmbedConfigS::toy_converged() }, 7u64),
        ("r0 s8", EmbedConfigS { shadow_restart_every: 0, shadow_ready_loss: -0.85, ..EmbedConfigS::toy_converged() }, 8),
        ("r0 s9", EmbedConfigS { shadow_restart_every: 0, shadow_ready_loss: -0.85, ..EmbedConfigS::toy_converged() }, 9),
        ("r350 s7", EmbedConfigS { shadow_restart_every: 350, shadow_ready_loss: -0.85, ..EmbedConfigS::toy_converged() }, 7),
        ("r350 s8", EmbedConfigS { shadow_restart_every: 350, shadow_ready_loss: -0.85, ..EmbedConfigS::toy_converged() }, 8),
        ("r350 s9", EmbedConfigS { shadow_restart_every: 350, shadow_ready_loss: -0.85, ..EmbedConfigS::toy_converged() }, 9),
    ] {
        let theta_star = weights.deep_clone();
        let bhub = SeedHub::new(bseed);
        let bundle = BundleS::generate(cfg.d, cfg.n_heads, PermutationFamily::HeadsAndWithin, embed_cfg, &bhub);
        let t0 = Instant::now();
        embed_s(&theta_star, &weights, &bundle, &data, &bhub).unwrap();
        let wall = t0.elapsed().as_secs_f32();

        let r_correct = extract_s_with_spec(&theta_star, &bundle, Some(&bundle.spec), &extract_set, Provenance::default()).unwrap();
        let r_identity = extract_s_with_spec(&theta_star, &bundle, None, &extract_set, Provenance::default()).unwrap();
        let mut wrong_rng = bhub.stream("wrong");
        let mut wrong_wrs = Vec::new();
        let mut all_wrong_sims: Vec<f32> = Vec::new();
        for _ in 0..5 {
            let wrong = sample_wrong_spec(&mut wrong_rng, &bundle.spec, PermutationFamily::HeadsAndWithin);
            let r = extract_s_with_spec(&theta_star, &bundle, Some(&wrong), &extract_set, Provenance::default()).unwrap();
            wrong_wrs.push(r.wr);
            all_wrong_sims.extend(sims(&r));
        }
        let r_wrong_wr = wrong_wrs.iter().sum::<f64>() / 5.0;
        let wrong_max = wrong_wrs.iter().cloned().fold(0.0f64, f64::max);
        let r_unwm = extract_s_with_spec(&weights, &bundle, Some(&bundle.spec), &extract_set, Provenance::default()).unwrap();

        let s_c = sims(&r_correct);
        let s_i = sims(&r_identity);
        let s_w = all_wrong_sims;
        let hi = s_c.iter().filter(|&&s| s > 0.9).count() as f64 / s_c.len() as f64;
        let lo_i = s_i.iter().filter(|&&s| s.abs() <= 0.3).count() as f64 / s_i.len() as f64;
        let lo_w = s_w.iter().filter(|&&s| s.abs() <= 0.3).count() as f64 / s_w.len() as f64;
        let fid = mean_feature_similarity(&theta_star, &weights, &eval_tokens).unwrap();
        let fid_uni = mean_feature_similarity(&theta_star, &weights, &extract_set[..64].to_vec()).unwrap();
        println!(
            "{label:18} {wall:5.1}s: WR {:.3} | unwm {:.3} wrong(avg/max) {:.3}/{:.3} id {:.3} | sims>0.9 {hi:.3} |id|<.3 {lo_i:.3} |wr|<.3 {lo_w:.3} | fid-sim eval {fid:.4} uni {fid_uni:.4}",
            r_correct.wr, r_unwm.wr, r_wrong_wr, wrong_max, r_identity.wr
        );

        if true {
            // extraction-attack retention on the converged model
            let oracle = ModelOracle::new(&theta_star);
            let attacker_ds = SyntheticDataset::generate(ds_cfg, 2048, &mut bhub.stream("attack.data"));
            let attacker_data: Vec<Vec<u16>> = attacker_ds.samples.iter().map(|s| s.tokens.clone()).collect();
            let (substitute, rep) = attack_extract(&oracle, cfg, &attacker_data, 6000, 32, 1e-3, &mut bhub.stream("attack.rng")).unwrap();
            let wr_sub = extract_s_with_spec(&substitute, &bundle, Some(&bundle.spec), &extract_set, Provenance::default()).unwrap().wr;
            let sim_eval = tokenmark::attacks::oracle_similarity(&substitute, &oracle, &eval_tokens).unwrap();
            let sub_report = extract_s_with_spec(&substitute, &bundle, Some(&bundle.spec), &extract_set, Provenance::default()).unwrap();
            let mut sub_sims = sims(&sub_report);
            sub_sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
            println!("    extraction attack: train-sim {:.3}, oracle-sim(eval) {sim_eval:.3}, substitute WR {wr_sub:.3}, lowest sims {:?}", rep.final_similarity, &sub_sims[..6]);
        }
    }
}
