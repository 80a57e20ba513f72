use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sandcage::guest::{decode_image, format, GuestVariant};
use sandcage::memory::MIN_REGION_SIZE;
use sandcage::pool::ContentClass;
use sandcage::{BackendKind, Error, PoolConfig, SandboxKey, SandboxPool, SyncHint, SyncMode};

fn small() -> PoolConfig {
    PoolConfig {
        region_size: MIN_REGION_SIZE,
        ..PoolConfig::default()
    }
}

fn image_key(n: usize) -> SandboxKey {
    SandboxKey::new("librli", format!("https://site{n}.example"), "image/x-rli")
}

#[test]
fn idle_images_stay_under_threshold() {
    let pool = SandboxPool::new(small());
    for n in 0..100 {
        let lease = pool.acquire(&image_key(n)).unwrap();
        drop(lease);
        assert!(pool.idle_count() <= 10);
        assert_eq!(pool.outstanding(), 0);
    }
    assert_eq!(pool.live_count(), 10);
    let (created, destroyed) = pool.churn();
    assert_eq!((created, destroyed), (100, 90));
    // The last ten keys are the ones kept.
    for n in 90..100 {
        drop(pool.acquire(&image_key(n)).unwrap());
    }
    assert_eq!(pool.churn().0, 100);
    drop(pool.acquire(&image_key(0)).unwrap());
    assert_eq!(pool.churn().0, 101);
}

#[test]
fn media_instances_are_never_kept() {
    let pool = SandboxPool::new(small());
    let key = SandboxKey::new("libvideo", "https://a.example", "video/webm");
    assert_eq!(key.class(), ContentClass::Media);
    for _ in 0..5 {
        let lease = pool.acquire(&key).unwrap();
        assert_eq!(pool.live_count(), 1);
        drop(lease);
        assert_eq!(pool.live_count(), 0);
    }
    assert_eq!(pool.churn(), (5, 5));
}

#[test]
fn same_key_reuses_the_instance() {
    let pool = SandboxPool::new(small());
    let key = image_key(1);
    let id = pool.acquire(&key).unwrap().sandbox().id();
    assert_eq!(pool.acquire(&key).unwrap().sandbox().id(), id);
    // Distinct keys never share.
    let a = pool.acquire(&key).unwrap();
    let b = pool.acquire(&image_key(2)).unwrap();
    assert!(!a.sandbox().same_instance(b.sandbox()));
    // Two concurrent leases of one key get two instances.
    let c = pool.acquire(&key).unwrap();
    assert!(!a.sandbox().same_instance(c.sandbox()));
    assert_eq!(pool.outstanding(), 3);
}

#[test]
fn discarded_leases_are_destroyed() {
    let pool = SandboxPool::new(small());
    let key = image_key(3);
    let mut lease = pool.acquire(&key).unwrap();
    let id = lease.sandbox().id();
    lease.discard();
    drop(lease);
    assert_eq!(pool.live_count(), 0);
    assert_ne!(pool.acquire(&key).unwrap().sandbox().id(), id);
}

#[test]
fn classes_have_separate_budgets() {
    let cfg = PoolConfig {
        image_threshold: 2,
        decompression_threshold: 3,
        ..small()
    };
    let pool = SandboxPool::new(cfg);
    for n in 0..6 {
        drop(pool.acquire(&image_key(n)).unwrap());
        drop(pool.acquire(&SandboxKey::new("libz", format!("o{n}"), "application/gzip")).unwrap());
    }
    assert_eq!(pool.idle_count(), 5);
}

#[test]
fn hints_select_the_sync_mode() {
    assert_eq!(SyncHint::Latency.mode(), SyncMode::Spin);
    assert_eq!(SyncHint::Bulk.mode(), SyncMode::Event);
    let pool = SandboxPool::new(PoolConfig {
        backend: BackendKind::Process,
        ..small()
    });
    let lease = pool.acquire(&image_key(0)).unwrap();
    lease.sync_hint(SyncHint::Latency).unwrap();
    let noop = lease.sandbox().lookup("noop").unwrap();
    lease.sandbox().invoke_void(&noop, ()).unwrap();
    lease.sync_hint(SyncHint::Bulk).unwrap();
    lease.sandbox().invoke_void(&noop, ()).unwrap();
}

#[test]
fn concurrent_stress_keeps_the_invariants() {
    let pool = SandboxPool::new(small());
    std::thread::scope(|s| {
        for t in 0..4u64 {
            let pool = &pool;
            s.spawn(move || {
                let mut rng = StdRng::seed_from_u64(t);
                for _ in 0..500 {
                    let key = if rng.gen_bool(0.1) {
                        SandboxKey::new("libvideo", "m", "video/mp4")
                    } else {
                        image_key(rng.gen_range(0..100))
                    };
                    let lease = pool.acquire(&key).unwrap();
                    assert!(lease.sandbox().is_alive());
                    assert_eq!(lease.key(), &key);
                    if rng.gen_bool(0.05) {
                        let mut lease = lease;
                        lease.discard();
                    }
                    assert!(pool.idle_count() <= 10);
                }
            });
        }
    });
    assert_eq!(pool.outstanding(), 0);
    assert!(pool.live_count() <= 10);
    let (created, destroyed) = pool.churn();
    assert_eq!(created - destroyed, pool.live_count() as u64);
}

#[test]
fn pooled_decoding() {
    let pool = SandboxPool::new(small());
    let mut rng = StdRng::seed_from_u64(11);
    for n in 0..20 {
        let (w, h, px) = format::random_image(&mut rng, 32, 32);
        let data = format::encode(&px, w, h).unwrap();
        let img = decode_image(&pool, &format!("https://o{}.example", n % 3), &data).unwrap();
        assert_eq!((img.width, img.height, img.pixels), (w, h, px));
    }
    assert_eq!(pool.churn().0, 3);
}

#[test]
fn a_violating_sandbox_is_not_reused() {
    let pool = SandboxPool::new(PoolConfig {
        guest: GuestVariant::M2,
        ..small()
    });
    let mut rng = StdRng::seed_from_u64(12);
    let (w, h, px) = format::random_image(&mut rng, 8, 8);
    let data = format::encode(&px, w, h).unwrap();
    let r = decode_image(&pool, "https://evil.example", &data);
    assert!(matches!(r, Err(Error::Taint(_))), "{r:?}");
    assert_eq!(pool.live_count(), 0);
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.conf");
    std::fs::write(&path, "# pool\nthreshold.image = 4\nthreshold.decompression=7\nbackend = process\n").unwrap();
    let cfg = PoolConfig::load(&path).unwrap();
    assert_eq!(cfg.threshold(ContentClass::Image), 4);
    assert_eq!(cfg.threshold(ContentClass::Decompression), 7);
    assert_eq!(cfg.threshold(ContentClass::Media), 0);
    assert_eq!(cfg.backend, BackendKind::Process);
    assert!(PoolConfig::parse("region_size = 12345").is_err());
    assert!(PoolConfig::parse("bogus = 1").is_err());
}
