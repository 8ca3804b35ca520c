use smkd::data::*;
use smkd::head::*;
use smkd::losses::*;
use smkd::trainer::*;
use smkd::vit::*;
use smkd::data::Split;
use std::time::Instant;

fn main() {
    let ds = generate_synthetic(12, 50, 32, 7).unwrap();
    let vit_cfg = VitConfig::desk_default();
    let head_cfg = HeadConfig::desk_default(64);
    let mut cfg = TrainConfig::desk_default(Stage::Supervised, 1);
    cfg.batch_size = 24;
    cfg.allow_cold_start = true;
    let aug = AugmentParams::desk_default(32);
    let pair = ModelPair::<f32>::fresh(&vit_cfg, &head_cfg, None, 1);
    let idx: Vec<usize> = (0..24).collect();
    let batch = prepare_batch::<f32>(&ds, &idx, &aug, &cfg, &vit_cfg, 5);
    let fwd = forward_batch_views(&vit_cfg, &pair.student, &pair.teacher,
        (&pair.center_cls, &pair.center_patch), (0.1, 0.04), &batch).unwrap();

    let labels: Vec<u32> = (0..24).map(|i| ds.labels[idx[i]] as u32).collect();
    let pairs = mine_intra_class_pairs(&labels);
    let mut terms = 0;
    for &(i,j) in &pairs { for sv in 0..2 { for tv in 0..2 { if !(i==j && sv==tv) { terms += 1; let _ = (sv,tv,j); } } } }
    println!("pairs: {}, view terms: {}", pairs.len(), terms);

    // time each piece over all terms
    let t0 = Instant::now();
    let mut n = 0;
    for &(i, j) in &pairs {
        for sv in 0..2 { for tv in 0..2 {
            if i == j && sv == tv { continue; }
            let p = ViewPair::new(i, sv, j, tv, labels[i]);
            let _ = loss_cls(&p, &fwd.teacher[j][tv].table, &fwd.student[i][sv].table).unwrap();
            n += 1;
        }}
    }
    println!("cls terms x{n}: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let mut matches_store = Vec::new();
    for &(i, j) in &pairs {
        for sv in 0..2 { for tv in 0..2 {
            if i == j && sv == tv { continue; }
            matches_store.push(match_patches(&fwd.teacher[j][tv].tokens.patches, &fwd.student[i][sv].tokens.patches).unwrap());
        }}
    }
    println!("match_patches: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let mut mi = 0;
    for &(i, j) in &pairs {
        for sv in 0..2 { for tv in 0..2 {
            if i == j && sv == tv { continue; }
            let _ = loss_patch(&fwd.teacher[j][tv].table, &fwd.student[i][sv].table, &matches_store[mi], &PatchWeighting::Uniform).unwrap();
            mi += 1;
        }}
    }
    println!("loss_patch: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let s2 = stage2_batch_loss(&pair.student, &fwd, &batch, &cfg).unwrap();
    println!("stage2_batch_loss degenerate batch: {:?} (total={})", t0.elapsed(), s2.total.item());

    // realistic batch: stratified across classes
    let base = ds.indices_of(Split::Base);
    let idx2: Vec<usize> = (0..24).map(|i| base[(i * 37) % base.len()]).collect();
    let batch2 = prepare_batch::<f32>(&ds, &idx2, &aug, &cfg, &vit_cfg, 6);
    let labels2: Vec<u32> = idx2.iter().map(|&i| ds.labels[i] as u32).collect();
    println!("realistic pairs: {}", mine_intra_class_pairs(&labels2).len());
    let fwd2 = forward_batch_views(&vit_cfg, &pair.student, &pair.teacher,
        (&pair.center_cls, &pair.center_patch), (0.1, 0.04), &batch2).unwrap();
    let t0 = Instant::now();
    let s2 = stage2_batch_loss(&pair.student, &fwd2, &batch2, &cfg).unwrap();
    println!("stage2_batch_loss realistic batch: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let _ = smkd::tensor::backward(&s2.total).unwrap();
    println!("stage2 backward realistic: {:?}", t0.elapsed());
}
// appended second entry point via env var switch in main is ugly; quick extra fn call
