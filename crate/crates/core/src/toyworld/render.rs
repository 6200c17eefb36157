use serde::{Deserialize, Serialize};

use super::scene::{Background, Color, Object, Relation, Scene, Shape, Size};

/// Interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

pub fn palette(c: Color) -> [u8; 3] {
    match c {
        Color::Red => [220, 40, 40],
        Color::Green => [40, 180, 60],
        Color::Blue => [50, 80, 230],
        Color::Yellow => [235, 215, 40],
        Color::Purple => [150, 60, 200],
    }
}

pub fn background_rgb(b: Background) -> [u8; 3] {
    match b {
        Background::Dark => [24, 24, 24],
        Background::Mid => [80, 80, 80],
        Background::Light => [140, 140, 140],
    }
}

/// Radius as a fraction of the canvas side.
fn radius(size: Size) -> f32 {
    match size {
        Size::Small => 0.11,
        Size::Large => 0.2,
    }
}

/// Object centers as canvas fractions; the relation decides which slot the first object takes.
pub fn slots(scene: &Scene) -> Vec<(f32, f32)> {
    const NEAR: f32 = 0.28;
    const FAR: f32 = 0.72;
    match scene.relation() {
        None => vec![(0.5, 0.5)],
        Some(Relation::LeftOf) => vec![(NEAR, 0.5), (FAR, 0.5)],
        Some(Relation::RightOf) => vec![(FAR, 0.5), (NEAR, 0.5)],
        Some(Relation::Above) => vec![(0.5, NEAR), (0.5, FAR)],
        Some(Relation::Below) => vec![(0.5, FAR), (0.5, NEAR)],
    }
}

fn covers(obj: &Object, dx: f32, dy: f32, r: f32) -> bool {
    match obj.shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        Shape::Triangle => {
            // Apex up, base below the center.
            let (top, bottom) = (-r, 0.8 * r);
            if dy < top || dy > bottom {
                return false;
            }
            dx.abs() <= r * (dy - top) / (bottom - top)
        }
    }
}

/// Draws `scene` on a `side x side` canvas. Pure function of its inputs.
pub fn render(scene: &Scene, background: Background, side: usize) -> Raster {
    let mut img = Raster::filled(side, side, background_rgb(background));
    let s = side as f32;
    for (obj, &(cx, cy)) in scene.objects().iter().zip(&slots(scene)) {
        let (cx, cy, r) = (cx * s, cy * s, radius(obj.size) * s);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(side);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(side);
        let rgb = palette(obj.color);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                if covers(obj, dx, dy, r) {
                    img.put(x, y, rgb);
                }
            }
        }
    }
    img
}
