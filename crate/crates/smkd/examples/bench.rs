// phase timing at desk scale, one training step
use smkd::data::*;
use smkd::head::*;
use smkd::trainer::*;
use smkd::vit::*;
use smkd::tensor::backward;
use std::time::Instant;

fn main() {
    let ds = generate_synthetic(12, 50, 32, 7).unwrap();
    let vit_cfg = VitConfig::desk_default();
    let head_cfg = HeadConfig::desk_default(64);
    let mut cfg = TrainConfig::desk_default(Stage::SslPretrain, 1);
    cfg.batch_size = 24;
    cfg.allow_cold_start = true;
    let aug = AugmentParams::desk_default(32);
    let pair = ModelPair::<f32>::fresh(&vit_cfg, &head_cfg, None, 1);
    let idx: Vec<usize> = (0..24).collect();

    let t0 = Instant::now();
    let batch = prepare_batch::<f32>(&ds, &idx, &aug, &cfg, &vit_cfg, 5);
    println!("prepare_batch: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let fwd = forward_batch_views(&vit_cfg, &pair.student, &pair.teacher,
        (&pair.center_cls, &pair.center_patch), (0.1, 0.04), &batch).unwrap();
    println!("forward_batch_views (both sides + heads): {:?}", t0.elapsed());

    let t0 = Instant::now();
    let s1 = stage1_batch_loss(&vit_cfg, &pair.student, &fwd, &batch, &cfg, 0.1, 0.04, &pair.center_cls).unwrap();
    println!("stage1 loss assembly: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let grads = backward(&s1.total).unwrap();
    println!("backward: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let mut opt = AdamW::new();
    let _ = opt.apply(&pair.student, &grads, 1e-3, 0.04).unwrap();
    println!("optimizer: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let _ = ema_update(&pair.teacher, &pair.student, 0.996).unwrap();
    println!("ema: {:?}", t0.elapsed());

    // stage2 with mined pairs
    let mut cfg2 = cfg.clone();
    cfg2.stage = Stage::Supervised;
    let t0 = Instant::now();
    let s2 = stage2_batch_loss(&pair.student, &fwd, &batch, &cfg2).unwrap();
    println!("stage2 loss assembly: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let _ = backward(&s2.total).unwrap();
    println!("stage2 backward: {:?}", t0.elapsed());
}
