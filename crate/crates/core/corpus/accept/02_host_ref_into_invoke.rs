//! Passing a host buffer straight into a guest call. Fixed.

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    let sum = sb.lookup("test_sum_bytes")?;
    let pixels = vec![1u8, 2, 3, 4];
    let buf = sb.malloc_array::<u8>(pixels.len() as u32)?;
    buf.write_slice(&pixels)?;
    let total: Tainted<u64> = sb.invoke(&sum, (&buf, 4u32))?;
    let _ = total;
    Ok(())
}
