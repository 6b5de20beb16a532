//! Where attention blocks go, and what each choice costs.
//!
//! A placement policy has two halves: a tier or station picking WHICH
//! blocks get SMA (T1 none, T2 first, T3 all but first, T4 all; S1/S2
//! odd/even, S3/S4 front/back half) and a position picking WHERE in the
//! block it sits (L1 after the conv, L3 before it, after the neuron).
//! This example enumerates policies on the same VGG and tabulates the
//! selected blocks and the parameter bill.
//!
//!     cargo run --example placement_policies

use sma_snn::model::config::{placement_set, ModelConfig, Placement};
use sma_snn::model::Model;
use sma_snn::Result;

fn main() -> Result<()> {
    let base = ModelConfig::desk_vgg(8, 10, 32, 32);
    let total = base.blocks.len() + 2; // conv blocks + coding view + head
    println!("VGG with {} conv blocks; placement universe 1..={}\n", base.blocks.len(), total);

    println!("policy    blocks with SMA       parameters");
    let mut baseline = None;
    for tier in ["T1", "T2", "T3", "T4", "S1", "S2", "S3", "S4"] {
        let id = format!("{}+L1", tier);
        let set = placement_set(Placement::parse(&id)?.tier, total);
        let mut cfg = base.clone();
        cfg.placement = id.clone();
        let model = Model::build(cfg, 1)?;
        let params = model.param_count();
        let baseline = *baseline.get_or_insert(params);
        println!(
            "{:<9} {:<21} {:>10}  (+{} over T1)",
            id,
            format!("{:?}", set),
            params,
            params - baseline
        );
    }

    // L2, between conv and batch norm, is rejected by construction: that
    // seam breaks the conv + bn fusion and such nets fail to converge.
    let mut bad = base.clone();
    bad.placement = "T3+L2".into();
    let err = Model::build(bad, 1).unwrap_err();
    println!("\nT3+L2 -> {}", err);
    Ok(())
}
