mod common;

use common::{random_gray, random_rgb};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ufa_fuse::imageio;
use ufa_fuse::pnm::{self, PnmImage};
use ufa_fuse::Error;

#[test]
fn hundred_random_images_round_trip_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..100 {
        let (w, h) = (rng.gen_range(1..48), rng.gen_range(1..48));
        let rgb = random_rgb(w, h, &mut rng);
        let gray = random_gray(w, h, &mut rng);
        let (pp, pg) = (tmp.path().join(format!("{i}.ppm")), tmp.path().join(format!("{i}.pgm")));
        imageio::write_rgb(&pp, &rgb).unwrap();
        imageio::write_gray(&pg, &gray).unwrap();
        assert_eq!(pnm::read(&pp).unwrap(), PnmImage::Rgb(rgb.clone()));
        assert_eq!(pnm::read(&pg).unwrap(), PnmImage::Gray(gray.clone()));
        assert_eq!(imageio::read_rgb(&pp).unwrap(), rgb);
        assert_eq!(imageio::read_gray(&pg).unwrap(), gray);
        let bytes = std::fs::read(&pp).unwrap();
        assert_eq!(bytes, pnm::encode_ppm(&rgb));
    }
}

#[cfg(feature = "png")]
#[test]
fn png_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..20 {
        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let rgb = random_rgb(w, h, &mut rng);
        let gray = random_gray(w, h, &mut rng);
        let (pc, pg) = (tmp.path().join(format!("{i}c.png")), tmp.path().join(format!("{i}g.png")));
        imageio::write_rgb(&pc, &rgb).unwrap();
        imageio::write_gray(&pg, &gray).unwrap();
        assert_eq!(imageio::read_rgb(&pc).unwrap(), rgb);
        assert_eq!(imageio::read_gray(&pg).unwrap(), gray);
    }
}

#[test]
fn header_comments_and_whitespace_are_accepted() {
    let bytes = b"P6 # comment\n# another\n2\t1\r\n255\n\x01\x02\x03\x04\x05\x06";
    let img = pnm::decode(bytes, "inline").unwrap().into_rgb();
    assert_eq!((img.width(), img.height()), (2, 1));
    assert_eq!(img.data(), &[1, 2, 3, 4, 5, 6]);
}

/// `(name, bytes, offset where the error is reported)`.
fn malformed() -> Vec<(&'static str, Vec<u8>, usize)> {
    vec![
        ("empty", b"".to_vec(), 0),
        ("one byte", b"P".to_vec(), 0),
        ("ascii ppm", b"P3\n1 1\n255\n0 0 0\n".to_vec(), 0),
        ("png magic", b"\x89PNG\r\n\x1a\n".to_vec(), 0),
        ("no separator", b"P61 1\n255\n...".to_vec(), 2),
        ("missing height", b"P6\n4\n".to_vec(), 5),
        ("letters in width", b"P5\nab 2\n255\n".to_vec(), 3),
        ("zero width", b"P5\n0 2\n255\n".to_vec(), 10),
        ("sixteen bit", b"P5\n1 1\n65535\n\x00\x00".to_vec(), 7),
        ("maxval glued to raster", b"P5\n1 1\n255x".to_vec(), 10),
        ("no raster", b"P5\n2 2\n255".to_vec(), 10),
        ("short raster", b"P6\n2 2\n255\n\x00\x01\x02".to_vec(), 14),
        ("huge dimensions", b"P6\n100000 100000\n255\n\x00".to_vec(), 22),
        ("overflowing width", b"P5\n99999999999999999999999 1\n255\n".to_vec(), 22),
        ("truncated comment", b"P5\n# no end".to_vec(), 11),
    ]
}

#[test]
fn malformed_fixtures_give_located_diagnostics() {
    for (name, bytes, offset) in malformed() {
        match pnm::decode(&bytes, name) {
            Err(Error::Parse { path, offset: at, message }) => {
                assert_eq!(path, name);
                assert_eq!(at, offset, "{name}: {message}");
                assert!(!message.is_empty());
            }
            other => panic!("{name}: expected a parse error, got {other:?}"),
        }
    }
}

#[test]
fn malformed_files_report_their_path() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.ppm");
    std::fs::write(&path, b"P6\n2 2\n255\n\x00").unwrap();
    let err = imageio::read_rgb(&path).unwrap_err().to_string();
    assert!(err.contains("bad.ppm") && err.contains("truncated raster"), "{err}");
    assert!(imageio::read_rgb(&tmp.path().join("missing.ppm")).is_err());
    assert!(matches!(imageio::read_rgb(&tmp.path().join("x.bmp")), Err(Error::Unsupported(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = pnm::decode(&bytes, "fuzz");
    }

    #[test]
    fn corrupted_headers_never_panic(
        magic in prop::sample::select(vec!["P5", "P6"]),
        header in "[0-9 #\n\tx]{0,16}",
        raster in prop::collection::vec(any::<u8>(), 0..32),
    ) {
        let mut bytes = magic.as_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&raster);
        if let Ok(img) = pnm::decode(&bytes, "fuzz") {
            let (w, h, len) = match &img {
                PnmImage::Gray(g) => (g.width(), g.height(), g.data().len()),
                PnmImage::Rgb(c) => (c.width(), c.height(), c.data().len() / 3),
            };
            prop_assert_eq!(w * h, len);
        }
    }

    #[test]
    fn encode_decode_is_identity(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = random_rgb(w, h, &mut rng);
        let gray = random_gray(w, h, &mut rng);
        prop_assert_eq!(pnm::decode(&pnm::encode_ppm(&rgb), "p").unwrap(), PnmImage::Rgb(rgb));
        prop_assert_eq!(pnm::decode(&pnm::encode_pgm(&gray), "g").unwrap(), PnmImage::Gray(gray));
    }
}
