//! Prints the container bytes of a tiny two-layer model as a hex dump.

use prunekit::container::encode;
use prunekit::model::{ModelBuilder, Padding};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ModelBuilder::new([2, 2, 1])
        .conv2d("c", 1, [1, 1], Padding::Valid, vec![0.5], Some(vec![-1.0]))
        .flatten("f")
        .build()?;
    let bytes = encode(&model)?;
    let header_len = u32::from_le_bytes(bytes[4..8].try_into()?) as usize;
    println!("{}", std::str::from_utf8(&bytes[8..8 + header_len])?);
    for (i, chunk) in bytes.chunks(16).enumerate() {
        let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        let ascii: String = chunk.iter().map(|&b| if b.is_ascii_graphic() { b as char } else { '.' }).collect();
        println!("{:08x}  {:<47}  {ascii}", i * 16, hex.join(" "));
    }
    Ok(())
}
