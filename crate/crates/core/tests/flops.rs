use tokenflow_core::flops::*;
use tokenflow_core::model::ModelConfig;

/// Desk beam model at r = 1, worked out by hand per component.
const DESK_IMAGE: u64 = 434_816 * 5;
const DESK_RADAR: u64 = 9_856 * 5;
const DESK_GPS: u64 = 1_168 * 5;
const DESK_ROUTER: u64 = 210_944 + 16_480 + 6_592 + 1_584;
const DESK_QKVO: u64 = 1_687_552;
const DESK_ATTENTION: u64 = 5_431_808;
const DESK_MLP: u64 = 1_687_552;
const DESK_ELEMENTWISE: u64 = 980_560;
const DESK_HEAD: u64 = 160 + 1_024;

#[test]
fn desk_report_matches_hand_sums() {
    let c = ModelConfig::desk_beam();
    let r = count_flops(&c, &[206; 4]).unwrap();
    let get = |name: &str| r.entries.iter().find(|e| e.name == name).unwrap().flops;
    assert_eq!(get("tokenizer.image"), DESK_IMAGE);
    assert_eq!(get("tokenizer.pointcloud"), DESK_IMAGE);
    assert_eq!(get("tokenizer.radar"), DESK_RADAR);
    assert_eq!(get("tokenizer.gps"), DESK_GPS);
    for l in 0..4 {
        assert_eq!(get(&format!("router.{l}")), DESK_ROUTER);
        assert_eq!(get(&format!("block.{l}.qkvo")), DESK_QKVO);
        assert_eq!(get(&format!("block.{l}.attention")), DESK_ATTENTION);
        assert_eq!(get(&format!("block.{l}.mlp")), DESK_MLP);
        assert_eq!(get(&format!("block.{l}.elementwise")), DESK_ELEMENTWISE);
    }
    assert_eq!(get("head"), DESK_HEAD);
    let per_layer = DESK_ROUTER + DESK_QKVO + DESK_ATTENTION + DESK_MLP + DESK_ELEMENTWISE;
    assert_eq!(r.total_flops, 2 * DESK_IMAGE + DESK_RADAR + DESK_GPS + 4 * per_layer + DESK_HEAD);
    assert_eq!(r.entries.len(), 4 + 4 * 5 + 1);
}

#[test]
fn desk_memory_matches_hand_sums() {
    let c = ModelConfig::desk_beam();
    let mem = estimate_memory(&c, &[206, 103, 62, 21], 4).unwrap();
    let get = |name: &str| mem.iter().find(|(n, _)| n == name).unwrap().1;
    for (l, k) in [206u64, 103, 62, 21].into_iter().enumerate() {
        assert_eq!(get(&format!("block.{l}.attention")), k * 32 * 4);
        assert_eq!(get(&format!("router.{l}")), (k * 32 + 32) * 4);
        assert_eq!(get(&format!("block.{l}.qkvo")), 4 * k * 64 * 4);
        assert_eq!(get(&format!("block.{l}.mlp")), 2 * k * 96 * 4);
    }
    // stem 16²·4 + 64²·1, stage convs, downs and the projection, per frame.
    let image = (1024 + 4096) + 2 * (1024 + 1024) + (512 + 1024) + 2 * (512 + 512) + (128 + 512) + 16 * 40;
    assert_eq!(get("tokenizer.image"), image * 4 * 5);
    let report = count_flops_with(&c, &[206, 103, 62, 21], 4).unwrap();
    assert_eq!(report.total_memory_bytes, mem.iter().map(|(_, b)| b).sum::<u64>());
}

#[test]
fn attention_scales_quadratically() {
    let c = ModelConfig::desk_beam();
    let full = count_flops(&c, &[206; 4]).unwrap();
    let half = count_flops(&c, &[103; 4]).unwrap();
    assert_eq!(full.flops_with_suffix(".attention"), 4 * half.flops_with_suffix(".attention"));
    for k in 1..=206usize {
        let r = count_flops(&c, &[k, 206, 206, 206]).unwrap();
        let a = r.entries.iter().find(|e| e.name == "block.0.attention").unwrap().flops;
        assert_eq!(a * 206 * 206, DESK_ATTENTION * (k * k) as u64);
    }
}

#[test]
fn overhead_is_small_at_desk_scale() {
    let c = ModelConfig::desk_beam();
    let r = count_flops(&c, &[206; 4]).unwrap();
    let overhead = r.flops_with_prefix("tokenizer") + r.flops_with_prefix("router");
    assert!((overhead as f64) / (r.total_flops as f64) < 0.2);
}

#[test]
fn full_scale_ratio_at_thirty_percent() {
    let c = ModelConfig::full_beam();
    let n = c.token_count();
    let full = count_flops(&c, &vec![n; c.layers]).unwrap();
    let ks = token_counts_for_ratios(&c, &vec![0.3; c.layers]);
    let low = count_flops(&c, &ks).unwrap();
    let ratio = low.total_flops as f64 / full.total_flops as f64;
    assert!(ratio <= 0.15, "ratio {ratio}");
    assert!(full.flops_with_suffix(".attention") as f64 / full.total_flops as f64 > 0.5);
}

#[test]
fn table_lists_every_component() {
    let c = ModelConfig::desk_handover();
    let r = count_flops(&c, &[166, 100, 50, 10]).unwrap();
    let table = r.to_table();
    assert_eq!(table.lines().count(), r.entries.len() + 2);
    assert!(table.contains("tokenizer.rssi") && table.contains("block.3.attention"));
}

/// Budget example for a γ' = 0.3 desk profile: γ = 0.09·baseline·1.5.
/// At desk scale the fixed tokenizer and linear-in-K costs keep the ratio
/// near 0.27, above the 0.135 budget.
#[test]
#[ignore = "not attainable at desk scale; see the acceptance report"]
fn desk_thirty_percent_profile_meets_budget() {
    let c = ModelConfig::desk_beam();
    let base = count_flops(&c, &[206; 4]).unwrap().total_flops as f64;
    let mut r = count_flops(&c, &token_counts_for_ratios(&c, &[0.3; 4])).unwrap();
    assert_eq!(check_budget(&mut r, 0.09 * base * 1.5).unwrap(), Verdict::Within);
}
