//! Passing a host buffer straight into a guest call.
//! expect: E0277

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    let sum = sb.lookup("test_sum_bytes")?;
    let pixels = vec![1u8, 2, 3, 4];
    let total: Tainted<u64> = sb.invoke(&sum, (&pixels, 4u32))?;
    let _ = total;
    Ok(())
}
