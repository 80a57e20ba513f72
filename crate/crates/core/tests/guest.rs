use rand::SeedableRng;
use sandcage::guest::{decode_in, format, DecodeOptions, GuestVariant, PixelPath};
use sandcage::{BackendKind, Error, Sandbox, SandboxConfig};

fn sandbox(kind: BackendKind) -> Sandbox {
    Sandbox::create(SandboxConfig::new(kind).region_size(1 << 22)).unwrap()
}

const BACKENDS: [BackendKind; 3] = [BackendKind::NullDirect, BackendKind::EmuSfi, BackendKind::Process];

#[test]
fn two_by_two_decodes_everywhere() {
    let data = format::encode(b"AAAB", 2, 2).unwrap();
    for kind in BACKENDS {
        let sb = sandbox(kind);
        let out = decode_in(&sb, &data, &DecodeOptions::default());
        let img = out.result.unwrap_or_else(|e| panic!("{kind}: {e}"));
        assert_eq!((img.width, img.height, img.pixels.as_slice()), (2, 2, b"AAAB".as_slice()));
        assert!(out.canaries_intact);
        assert_eq!(out.scanlines, vec![(1, 1), (2, 2)]);
    }
}

#[test]
fn random_images_match_the_reference() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    for kind in BACKENDS {
        let sb = sandbox(kind);
        for n in 0..25 {
            let (w, h, px) = format::random_image(&mut rng, 200, 120);
            let data = format::encode(&px, w, h).unwrap();
            let opts = DecodeOptions {
                pixels: if n % 2 == 0 { PixelPath::Verified } else { PixelPath::Unchecked },
                ..DecodeOptions::default()
            };
            let img = decode_in(&sb, &data, &opts).result.unwrap();
            assert_eq!(img.pixels, px, "{kind} image {n}");
        }
    }
}

#[test]
fn truncated_stream_is_a_guest_abort() {
    let mut data = format::encode(&[9u8; 64 * 8], 64, 8).unwrap();
    data.truncate(data.len() - 5);
    for kind in BACKENDS {
        let sb = sandbox(kind);
        let out = decode_in(&sb, &data, &DecodeOptions::default());
        assert!(matches!(out.result, Err(Error::GuestAbort(_))), "{kind}: {:?}", out.result);
        // The sandbox survives and decodes the next image.
        let ok = format::encode(b"AAAB", 2, 2).unwrap();
        assert!(decode_in(&sb, &ok, &DecodeOptions::default()).result.is_ok());
    }
}

#[test]
fn bad_magic_is_rejected() {
    for kind in BACKENDS {
        let sb = sandbox(kind);
        let out = decode_in(&sb, b"JPEG not really", &DecodeOptions::default());
        assert!(out.result.is_err(), "{kind}");
    }
}

#[test]
fn variant_names_round_trip() {
    for v in GuestVariant::ALL {
        assert_eq!(v.name().parse::<GuestVariant>().unwrap(), v);
    }
    assert!("m9".parse::<GuestVariant>().is_err());
}

#[test]
fn process_backend_runs_in_another_process() {
    let sb = sandbox(BackendKind::Process);
    let pid = sb.process_id().expect("worker pid");
    assert_ne!(pid, std::process::id());
    let data = format::encode(b"AAAB", 2, 2).unwrap();
    assert!(decode_in(&sb, &data, &DecodeOptions::default()).result.is_ok());
    assert!(std::path::Path::new(&format!("/proc/{pid}")).exists());
    sb.destroy();
}
