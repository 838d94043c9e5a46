mod common;

use std::sync::Arc;

use common::{crop, load, tiny_graph, widen_to_14, NATURAL};
use mosaic_codec::pipeline::BitstreamHeader;
use mosaic_codec::quantizer::design_codebook;
use mosaic_codec::{
    analyze_image, decode_image, encode_image, BayerPhase, CnnPredictor, ExecMode, LinearPredictor, MosaicImage,
    NoWeights, QuantizerCodebook,
};

fn with_phase(img: &MosaicImage, phase: BayerPhase) -> MosaicImage {
    MosaicImage::new(img.width(), img.height(), img.bit_depth(), phase, img.samples().to_vec()).unwrap()
}

#[test]
fn natural_images_round_trip_with_linear_predictor() {
    for name in NATURAL {
        let img = load(name);
        let cb = design_codebook(std::slice::from_ref(&img), 16, ExecMode::Auto).unwrap();
        let bytes = encode_image(&img, &LinearPredictor, &cb, 32, ExecMode::Auto).unwrap();
        assert_eq!(decode_image(&bytes, &NoWeights).unwrap(), img, "{name}");
        let (h, _) = BitstreamHeader::parse(&bytes).unwrap();
        let bps = h.payload_len as f64 * 8.0 / img.pixel_count() as f64;
        assert!(bps < 8.0, "{name}: {bps} bits/sample");
    }
}

#[test]
fn natural_crops_round_trip_all_phases_and_depths() {
    let img = load(NATURAL[0]);
    let base = crop(&img, 100, 60, 96, 128);
    for phase in BayerPhase::ALL {
        for (i, src) in [base.clone(), widen_to_14(&base, 7)].into_iter().enumerate() {
            let src = with_phase(&src, phase);
            let g = tiny_graph(src.bit_depth());
            let cnn = CnnPredictor::new(Arc::clone(&g));
            let cb = design_codebook(std::slice::from_ref(&src), 16, ExecMode::Auto).unwrap();
            for bytes in [
                encode_image(&src, &LinearPredictor, &cb, 32, ExecMode::Auto).unwrap(),
                encode_image(&src, &cnn, &cb, 32, ExecMode::Auto).unwrap(),
            ] {
                assert_eq!(decode_image(&bytes, &g).unwrap(), src, "{phase} variant {i}");
            }
        }
    }
}

#[test]
fn per_channel_report_is_consistent() {
    let img = load(NATURAL[2]);
    let rep = analyze_image(&img, &LinearPredictor, &QuantizerCodebook::geometric(8, 16).unwrap(), 32, ExecMode::Auto)
        .unwrap();
    for h in rep.per_channel {
        assert!(h > 0.0 && h < 8.0);
    }
    let mean = rep.per_channel.iter().sum::<f64>() / 4.0;
    assert!((mean - rep.entropy).abs() < 1e-12);
}
