//! Prints the bottleneck mask for a small layout and checks where the
//! target rows may look.

use lbr::ib_mask::{build_ib_mask, CompressionPolicy, SegmentLayout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let policy = CompressionPolicy::new(3.0)?;
    let x_len = 7;
    let layout = SegmentLayout::new(x_len, policy.z_count(x_len)?, 4)?;
    let mask = build_ib_mask(layout, false)?;
    println!(
        "x={} z={} y={}  ('#' = may attend)",
        layout.x_len(),
        layout.z_len(),
        layout.y_len()
    );
    print!("{}", mask.mask().to_ascii());
    let first_y = layout.y_range().start;
    println!(
        "first target row sees columns {:?}",
        mask.mask().allowed_in_row(first_y)
    );
    Ok(())
}
