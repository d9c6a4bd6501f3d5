//! Declarative network builders with exact parameter accounting.

mod dense_ae;
mod params;
mod unet;

pub use dense_ae::{build_dense_autoencoder, count_dense_ae_parameters, DenseAEConfig, DenseAutoencoder};
pub use params::{init_conv_weight, init_tconv_weight, ParameterStore, TapedParams};
pub use unet::{build_unet, count_unet_parameters, UNet, UNetConfig, LEAKY_SLOPE};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Rng;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// The analytic count always equals the built store's element count.
        #[test]
        fn unet_count_matches_build(
            depth in 1usize..4,
            init in 1usize..5,
            cin in 1usize..3,
            classes in 1usize..4,
            seed in 0u64..1000,
        ) {
            let cfg = UNetConfig { depth, init_filters: init, in_channels: cin, class_count: classes };
            let net = build_unet(cfg, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(net.params.total_elements(), count_unet_parameters(&cfg));
        }

        #[test]
        fn dense_ae_count_matches_build(
            stages in proptest::collection::vec(1usize..5, 1..3),
            bottleneck in 1usize..6,
            cin in 1usize..3,
            cout in 1usize..3,
            seed in 0u64..1000,
        ) {
            let cfg = DenseAEConfig {
                stage_growths: stages,
                bottleneck_growth: bottleneck,
                in_channels: cin,
                out_channels: cout,
            };
            let net = build_dense_autoencoder(cfg.clone(), &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(net.params.total_elements(), count_dense_ae_parameters(&cfg));
        }
    }

    /// Per-layer formula Cout*(Cin*kh*kw) + Cout, verified by enumerating
    /// the actual weight tensors of a tiny build.
    #[test]
    fn per_layer_counts_match_weight_enumeration() {
        let cfg = UNetConfig { depth: 1, init_filters: 2, in_channels: 1, class_count: 2 };
        let net = build_unet(cfg, &mut Rng::new(0)).unwrap();
        let mut by_layer = std::collections::BTreeMap::<String, usize>::new();
        for (name, t) in net.params.iter() {
            let layer = name.rsplit_once('.').unwrap().0.to_string();
            *by_layer.entry(layer).or_default() += t.len();
        }
        assert_eq!(by_layer["enc0.conv1"], 2 * (1 * 9) + 2);
        assert_eq!(by_layer["enc0.conv2"], 2 * (2 * 9) + 2);
        assert_eq!(by_layer["bottleneck.conv1"], 4 * (2 * 9) + 4);
        assert_eq!(by_layer["bottleneck.conv2"], 4 * (4 * 9) + 4);
        assert_eq!(by_layer["dec0.up"], 4 * 2 * 4 + 2);
        assert_eq!(by_layer["dec0.conv1"], 2 * (4 * 9) + 2);
        assert_eq!(by_layer["dec0.conv2"], 2 * (2 * 9) + 2);
        assert_eq!(by_layer["head"], 2 * (2 * 1) + 2);
    }
}
