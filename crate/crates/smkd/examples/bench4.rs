use smkd::data::*;
use smkd::head::*;
use smkd::trainer::*;
use smkd::vit::*;
use smkd::tensor::Tensor;
use std::time::Instant;

fn main() {
    let ds = generate_synthetic(12, 50, 32, 7).unwrap();
    let vit_cfg = VitConfig::desk_default();
    let head_cfg = HeadConfig::desk_default(64);
    let mut cfg = TrainConfig::desk_default(Stage::SslPretrain, 1);
    cfg.batch_size = 24;
    let aug = AugmentParams::desk_default(32);
    let pair = ModelPair::<f32>::fresh(&vit_cfg, &head_cfg, None, 1);
    let idx: Vec<usize> = (0..24).collect();
    let batch = prepare_batch::<f32>(&ds, &idx, &aug, &cfg, &vit_cfg, 5);

    for _ in 0..3 {
        let t0 = Instant::now();
        let mut views = Vec::new();
        for item in &batch.items {
            for v in &item.views {
                views.push(pair.teacher.vit.patchify(&vit_cfg, v).unwrap());
            }
        }
        println!("patchify x{}: {:?}", views.len(), t0.elapsed());

        let t0 = Instant::now();
        let sets = pair.teacher.vit.forward_batch(&vit_cfg, &views).unwrap();
        println!("vit forward_batch: {:?}", t0.elapsed());

        let t0 = Instant::now();
        let d = 64;
        let mut parts = Vec::new();
        for ts in &sets {
            parts.push(ts.cls.reshape(&[1, d]).unwrap());
            parts.push(ts.patches.clone());
        }
        let stack = Tensor::concat_rows(&parts).unwrap();
        let logits = pair.teacher.head.project_rows(&stack).unwrap();
        println!("head project {:?} rows: {:?}", logits.shape(), t0.elapsed());

        let t0 = Instant::now();
        let k = 256;
        for vi in 0..48 {
            let base = vi * 17;
            let cls_logit = logits.select_block(base, 1, 0, k).unwrap();
            let patch_logit = logits.select_block(base + 1, 16, 0, k).unwrap();
            let cd = teacher_distribution_rows(&cls_logit, &pair.center_cls, 0.04).unwrap();
            let pd = teacher_distribution_rows(&patch_logit, &pair.center_patch, 0.04).unwrap();
            let _ = smkd::losses::ProbTable::new(cd.reshape(&[k]).unwrap(), pd, smkd::losses::Side::Teacher).unwrap();
        }
        println!("distributions+tables: {:?}", t0.elapsed());
        println!("---");
    }
}
