//! JPEG codec oracle tests: frozen dumps from an independent reference
//! decoder, round-trip exactness, rejection of unsupported streams, and a
//! third-party decode of our own encoder output.

use std::fs;
use std::path::PathBuf;

use mrag_core::error::JpegError;
use mrag_core::image8::Rgb8Image;
use mrag_core::jpeg::{self, ComponentPlane, JpegImage};
use mrag_core::rng::DetRng;

fn fixture(name: &str) -> Vec<u8> {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", name].iter().collect();
    fs::read(&p).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

fn fixture_names() -> Vec<String> {
    let dir: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures"].iter().collect();
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let n = e.unwrap().file_name().into_string().unwrap();
            (n.starts_with('f') && n.ends_with(".jpg")).then_some(n)
        })
        .collect();
    names.sort();
    assert!(names.len() >= 5, "need at least 5 reference files");
    names
}

#[test]
fn coefficient_dumps_match_reference_decoder() {
    for name in fixture_names() {
        let img = jpeg::parse(&fixture(&name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        let expected = String::from_utf8(fixture(&name.replace(".jpg", ".coefdump"))).unwrap();
        assert_eq!(img.dump(), expected, "coefficient dump differs for {name}");
    }
}

#[test]
fn pixel_decode_matches_reference_within_one_level() {
    for name in fixture_names() {
        let img = jpeg::parse(&fixture(&name)).unwrap();
        let got = jpeg::decode_pixels(&img);
        let oracle = fixture(&name.replace(".jpg", ".oracle.rgb"));
        assert_eq!(got.data().len(), oracle.len(), "{name}");
        let max = got
            .data()
            .iter()
            .zip(&oracle)
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .max()
            .unwrap();
        assert!(max <= 1, "{name}: max deviation {max} from reference decoder");
    }
}

#[test]
fn pixel_decode_within_libjpeg_fixed_point_envelope() {
    for name in fixture_names() {
        let img = jpeg::parse(&fixture(&name)).unwrap();
        let got = jpeg::decode_pixels(&img);
        let libjpeg = fixture(&name.replace(".jpg", ".libjpeg.rgb"));
        let diffs: Vec<i32> = got
            .data()
            .iter()
            .zip(&libjpeg)
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .collect();
        let max = *diffs.iter().max().unwrap();
        let mean = diffs.iter().sum::<i32>() as f64 / diffs.len() as f64;
        assert!(max <= 3, "{name}: max {max} vs libjpeg");
        assert!(mean <= 0.5, "{name}: mean {mean:.3} vs libjpeg");
    }
}

#[test]
fn parse_encode_round_trip_is_coefficient_exact() {
    for name in fixture_names() {
        let img = jpeg::parse(&fixture(&name)).unwrap();
        let bytes = jpeg::encode(&img).unwrap();
        assert_eq!(&bytes[..2], &[0xFF, 0xD8], "{name}: SOI");
        assert_eq!(&bytes[bytes.len() - 2..], &[0xFF, 0xD9], "{name}: EOI");
        let again = jpeg::parse(&bytes).unwrap();
        assert_eq!(img.planes, again.planes, "{name}: planes");
        assert_eq!(img.quant_tables, again.quant_tables, "{name}: tables");
        // idempotence of the full cycle
        let bytes2 = jpeg::encode(&again).unwrap();
        let third = jpeg::parse(&bytes2).unwrap();
        assert_eq!(again.planes, third.planes, "{name}: second round");
    }
}

#[test]
fn uniform_gray_has_zero_ac_and_equal_dc() {
    let img = jpeg::parse(&fixture("f06_gray16.jpg")).unwrap();
    let y = &img.planes[0];
    let dc0 = y.coeffs[0];
    for b in 0..4 {
        assert_eq!(y.coeffs[b * 64], dc0, "Y DC of block {b}");
        for k in 1..64 {
            assert_eq!(y.coeffs[b * 64 + k], 0, "AC {k} of block {b}");
        }
    }
}

#[test]
fn unsupported_streams_are_rejected_specifically() {
    assert!(matches!(
        jpeg::parse(&fixture("bad_subsampled.jpg")),
        Err(JpegError::SubsamplingUnsupported)
    ));
    assert!(matches!(
        jpeg::parse(&fixture("bad_progressive.jpg")),
        Err(JpegError::ProgressiveUnsupported)
    ));
    assert!(matches!(jpeg::parse(b"not a jpeg"), Err(JpegError::NotJpeg)));
}

#[test]
fn truncated_stream_is_a_truncation_error() {
    let full = fixture("f05_blobs16.jpg");
    // cut inside the entropy data, before EOI
    let cut = &full[..full.len() - 8];
    assert!(matches!(jpeg::parse(cut), Err(JpegError::Truncated(_))));
    // missing EOI only
    let no_eoi = &full[..full.len() - 2];
    assert!(matches!(jpeg::parse(no_eoi), Err(JpegError::Truncated(_))));
}

#[test]
fn synthetic_round_trips_with_random_coefficients() {
    let mut rng = DetRng::new(31);
    for case in 0..20 {
        let (w, h) = (16 + 8 * (case % 3), 16 + 8 * (case % 2));
        let (luma, chroma) = jpeg::quant_tables_for_quality(75).unwrap();
        let n = (w / 8) * (h / 8) * 64;
        let plane = |rng: &mut DetRng, dense: bool| -> Vec<i32> {
            (0..n)
                .map(|i| {
                    if i % 64 == 0 {
                        rng.below(400) as i32 - 200
                    } else if dense || rng.below(4) == 0 {
                        rng.below(61) as i32 - 30
                    } else {
                        0
                    }
                })
                .collect()
        };
        let img = JpegImage {
            width: w,
            height: h,
            planes: [
                ComponentPlane { quant_table_id: 0, coeffs: plane(&mut rng, case % 2 == 0) },
                ComponentPlane { quant_table_id: 1, coeffs: plane(&mut rng, false) },
                ComponentPlane { quant_table_id: 1, coeffs: plane(&mut rng, false) },
            ],
            quant_tables: vec![luma, chroma],
            huffman: None,
        };
        let bytes = jpeg::encode(&img).unwrap();
        let back = jpeg::parse(&bytes).unwrap();
        assert_eq!(img.planes, back.planes, "case {case}");
    }
}

#[test]
fn encoder_rejects_out_of_range_coefficients() {
    let (luma, chroma) = jpeg::quant_tables_for_quality(75).unwrap();
    let mut img = JpegImage {
        width: 8,
        height: 8,
        planes: [
            ComponentPlane { quant_table_id: 0, coeffs: vec![0; 64] },
            ComponentPlane { quant_table_id: 1, coeffs: vec![0; 64] },
            ComponentPlane { quant_table_id: 1, coeffs: vec![0; 64] },
        ],
        quant_tables: vec![luma, chroma],
        huffman: None,
    };
    img.planes[0].coeffs[5] = 2000; // AC beyond 1023
    assert!(matches!(
        jpeg::encode(&img),
        Err(JpegError::CoefficientOutOfRange { .. })
    ));
}

#[test]
fn compress_decode_cycle_is_reasonable() {
    // compress a smooth synthetic image and verify decode stays close
    let mut rng = DetRng::new(77);
    let (w, h) = (32, 32);
    let mut img = Rgb8Image::filled(w, h, [0, 0, 0]);
    let (cx, cy) = (rng.uniform() * w as f64, rng.uniform() * h as f64);
    for y in 0..h {
        for x in 0..w {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let v = |k: f64| (128.0 + 90.0 * ((d / 9.0 + k).sin())).clamp(0.0, 255.0) as u8;
            img.set_pixel(x, y, [v(0.0), v(1.0), v(2.0)]);
        }
    }
    let jp = jpeg::compress_rgb(&img, 75).unwrap();
    let bytes = jpeg::encode(&jp).unwrap();
    let back = jpeg::parse(&bytes).unwrap();
    assert_eq!(jp.planes, back.planes);
    let px = jpeg::decode_pixels(&back);
    let mse: f64 = px
        .data()
        .iter()
        .zip(img.data())
        .map(|(&a, &b)| ((a as f64) - (b as f64)).powi(2))
        .sum::<f64>()
        / px.data().len() as f64;
    let psnr = 10.0 * (255.0f64 * 255.0 / mse).log10();
    assert!(psnr > 28.0, "quality-75 cycle PSNR {psnr:.2} dB");
}

#[test]
fn third_party_decoder_reads_our_streams() {
    // jpeg-decoder (an unrelated production decoder) must accept and decode
    // every stream our encoder writes
    for name in fixture_names() {
        let ours = jpeg::encode(&jpeg::parse(&fixture(&name)).unwrap()).unwrap();
        let mut dec = jpeg_decoder::Decoder::new(&ours[..]);
        let pixels = dec.decode().unwrap_or_else(|e| panic!("{name}: jpeg-decoder: {e}"));
        let info = dec.info().unwrap();
        assert_eq!(info.pixel_format, jpeg_decoder::PixelFormat::RGB24);
        let mine = jpeg::decode_pixels(&jpeg::parse(&ours).unwrap());
        assert_eq!(pixels.len(), mine.data().len());
        let max = pixels
            .iter()
            .zip(mine.data())
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .max()
            .unwrap();
        assert!(max <= 3, "{name}: jpeg-decoder disagrees by {max}");
    }
}
