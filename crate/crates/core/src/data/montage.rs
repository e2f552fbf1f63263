//! Standard 19-channel 10–20 montage on the unit sphere.

/// (label, inclination θ°, azimuth φ°) in BESA spherical convention.
const STANDARD_1020: [(&str, f64, f64); 19] = [
    ("Fp1", -92.0, -72.0),
    ("Fp2", 92.0, 72.0),
    ("F7", -92.0, -36.0),
    ("F3", -60.0, -51.0),
    ("Fz", 46.0, 90.0),
    ("F4", 60.0, 51.0),
    ("F8", 92.0, 36.0),
    ("T3", -92.0, 0.0),
    ("C3", -46.0, 0.0),
    ("Cz", 0.0, 0.0),
    ("C4", 46.0, 0.0),
    ("T4", 92.0, 0.0),
    ("T5", -92.0, 36.0),
    ("P3", -60.0, 51.0),
    ("Pz", 46.0, -90.0),
    ("P4", 60.0, -51.0),
    ("T6", 92.0, -36.0),
    ("O1", -92.0, 72.0),
    ("O2", 92.0, -72.0),
];

pub const STANDARD_CHANNELS: usize = STANDARD_1020.len();

pub fn channel_names(channels: usize) -> Vec<&'static str> {
    STANDARD_1020.iter().take(channels).map(|e| e.0).collect()
}

/// Cartesian unit vectors (x right, y anterior, z up) for the first
/// `channels` electrodes of the standard list.
pub fn standard_coords(channels: usize) -> Vec<[f64; 3]> {
    STANDARD_1020
        .iter()
        .take(channels)
        .map(|&(_, theta, phi)| {
            let (t, p) = (theta.to_radians(), phi.to_radians());
            [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
        })
        .collect()
}
