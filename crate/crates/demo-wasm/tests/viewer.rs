use lucas_demo_wasm::{Channel, Layers, Viewer};

fn count(px: &[u8], rgb: [u8; 3]) -> usize {
    px.chunks(4).filter(|p| p[..3] == rgb).count()
}

const HAIR: [u8; 3] = [89, 51, 153];

#[test]
fn bald_view_hides_every_hair_pixel() {
    let mut v = Viewer::new(2, 2, 48).unwrap();
    assert!(v.has_hair());
    v.set_channel(Channel::Segmentation);
    let layered = v.render().unwrap();
    assert_eq!(layered.len(), 48 * 48 * 4);
    assert!(count(&layered, HAIR) > 0);
    v.set_layers(Layers::Bald);
    assert_eq!(count(&v.render().unwrap(), HAIR), 0);
}

#[test]
fn pose_and_expression_change_the_image() {
    let mut v = Viewer::new(1, 0, 32).unwrap();
    let base = v.render().unwrap();
    assert_eq!(base, v.render().unwrap());
    v.set_expression(0, 1.0);
    let smiling = v.render().unwrap();
    assert_ne!(base, smiling);
    v.set_head(0.4, 0.0);
    assert_ne!(smiling, v.render().unwrap());
}

#[test]
fn regenerate_switches_style() {
    let mut v = Viewer::new(0, 0, 24).unwrap();
    assert!(!v.has_hair());
    v.regenerate(0, 1).unwrap();
    assert!(v.has_hair());
}
