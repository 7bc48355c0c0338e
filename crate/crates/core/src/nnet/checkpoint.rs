//! `.fhw` checkpoints: a plain-text layout header followed by little-endian
//! f32 values.
//!
//! ```text
//! FHW1
//! tensors=3
//! conv0.weight 8x1x3x3 0
//! conv0.bias 8 72
//! ...
//! end
//! <f32 LE payload>
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{Layout, NnError, ParamVector, TensorSlot};

pub const CHECKPOINT_MAGIC: &str = "FHW1";

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn write_checkpoint(params: &ParamVector, out: &mut impl Write) -> Result<(), NnError> {
    let mut header = format!("{CHECKPOINT_MAGIC}\ntensors={}\n", params.layout.slots.len());
    for s in &params.layout.slots {
        let shape: Vec<String> = s.shape.iter().map(usize::to_string).collect();
        header.push_str(&format!("{} {} {}\n", s.name, shape.join("x"), s.offset));
    }
    header.push_str("end\n");
    let io = |e: std::io::Error| bad(e.to_string());
    out.write_all(header.as_bytes()).map_err(io)?;
    let mut payload = Vec::with_capacity(params.len() * 4);
    for v in &params.values {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&payload).map_err(io)
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ParamVector, NnError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
    let marker = b"\nend\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing end of header"))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("not an FHW1 checkpoint"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("tensors="))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing tensor count"))?;
    let mut slots = Vec::with_capacity(count);
    for line in lines.by_ref().take(count) {
        let parts: Vec<&str> = line.split(' ').collect();
        let [name, shape, offset] = parts[..] else {
            return Err(bad(format!("bad layout line {line:?}")));
        };
        let shape = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
            .collect::<Result<Vec<usize>, _>>()?;
        let offset = offset.parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
        slots.push(TensorSlot {
            name: name.to_owned(),
            shape,
            offset,
        });
    }
    if slots.len() != count || lines.next() != Some("end") {
        return Err(bad("layout header truncated"));
    }
    let layout = Layout { slots };
    let payload = &bytes[split..];
    if payload.len() != layout.total_len() * 4 {
        return Err(bad(format!(
            "payload has {} bytes, layout needs {}",
            payload.len(),
            layout.total_len() * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ParamVector::new(values, Arc::new(layout))
}

pub fn save_checkpoint(params: &ParamVector, path: &Path) -> Result<(), NnError> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf).map_err(|e| bad(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamVector, NnError> {
    let mut f = fs::File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut f)
}
