use tokenmark::data::{DatasetConfig, SyntheticDataset};
use tokenmark::permutation::PermutationFamily;
use tokenmark::rng::SeedHub;
use tokenmark::train::{train_classifier, TrainConfig};
use tokenmark::transformer::{ModelConfig, Reduction, TaskHead, TransformerWeights};
use tokenmark::watermark::scheme_s::{embed_s, BundleS, EmbedConfigS};

fn main() {
    let hub = SeedHub::new(42);
    let cfg = ModelConfig::toy();
    let ds_cfg = DatasetConfig::toy();
    let weights = TransformerWeights::random_init(cfg, &mut hub.stream("model.init"));
    let head = TaskHead::linear("head.ds", cfg.d, 10, Reduction::FirstToken, &mut hub.stream("model.head"));
    let data = SyntheticDataset::generate(ds_cfg, 2048, &mut hub.stream("data.train"));
    train_classifier(&weights, &head, &data, &TrainConfig { steps: 800, batch: 32, lr: 1e-3 }, None, &mut hub.stream("train")).unwrap();

    for (label, ecfg) in [
        ("r125 s1e-3", EmbedConfigS { g_hidden: 64, ..EmbedConfigS::toy_converged() }),
        ("r60 s3e-3", EmbedConfigS { g_hidden: 64, shadow_restart_every: 60, lr_shadow: 3e-3, ..EmbedConfigS::toy_converged() }),
    ] {
        let theta_star = weights.deep_clone();
        let bhub = SeedHub::new(7);
        let bundle = BundleS::generate(cfg.d, cfg.n_heads, PermutationFamily::HeadsAndWithin, ecfg, &bhub);
        let trace = embed_s(&theta_star, &weights, &bundle, &data, &bhub).unwrap();
        let ready = trace.loss_shadow.iter().filter(|&&l| l <= -0.8).count();
        let l100: f32 = trace.loss_shadow[95..100].iter().sum::<f32>() / 5.0;
        let l499: f32 = trace.loss_shadow[495..].iter().sum::<f32>() / 5.0;
        println!("{label}: cfg.restart={} lr_shadow={} ready_steps={ready} l_s@100={l100:.3} l_s@end={l499:.3}",
            bundle.embed.shadow_restart_every, bundle.embed.lr_shadow);
    }
}
