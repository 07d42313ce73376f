//! Deterministic class colors for exported masks: a fixed table for
//! indices 0-9, hash-derived colors beyond.

const BASE: [[u8; 3]; 10] = [
    [68, 68, 68],
    [230, 80, 60],
    [70, 190, 90],
    [70, 110, 220],
    [235, 200, 60],
    [180, 85, 200],
    [80, 200, 200],
    [240, 140, 50],
    [150, 220, 90],
    [230, 120, 170],
];

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn class_color(index: usize) -> [u8; 3] {
    if index < BASE.len() {
        return BASE[index];
    }
    let h = splitmix64(index as u64);
    // Keep hashed colors bright enough to tell apart on dark backgrounds.
    [
        64 + (h & 0x7F) as u8 | 0x20,
        64 + ((h >> 8) & 0x7F) as u8 | 0x20,
        64 + ((h >> 16) & 0x7F) as u8 | 0x20,
    ]
}

pub fn class_palette(num_classes: usize) -> Vec<[u8; 3]> {
    (0..num_classes).map(class_color).collect()
}
