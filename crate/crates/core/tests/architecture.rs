//! Architecture guards: the default unwarper's parameter count is frozen in
//! a golden file so accidental structural drift fails loudly.

use doctr_core::geotr::{GeoConfig, GeoModel};
use doctr_core::numerics::Rng;

#[test]
fn default_geo_parameter_count_matches_golden() {
    let golden: usize = include_str!("golden/geo_param_count.txt")
        .trim()
        .parse()
        .expect("golden file holds a number");
    let model = GeoModel::<f32>::new(GeoConfig::default(), &mut Rng::new(0)).unwrap();
    assert_eq!(
        model.params.total_scalars(),
        golden,
        "default unwarper parameter count drifted; update the golden file \
         only for an intentional architecture change"
    );
}

#[test]
fn default_config_contract_values() {
    let cfg = GeoConfig::default();
    assert_eq!(cfg.input_size, 288);
    assert_eq!(cfg.cg, 512);
    assert_eq!(cfg.tokens(), 1296);
    assert!(cfg.cg % cfg.heads == 0);
}
