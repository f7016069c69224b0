mod common;

use selsearch_core::trainer::Variant;

#[test]
fn finite_differences_agree_on_random_instances() {
    let mut checked = 0;
    let mut seen = [false; 2];
    let mut shared = false;
    for seed in 0..300 {
        let mut inst = common::fd_instance(seed);
        let variant = inst.spec.variant;
        let share = inst.model.share_towers();
        if let Some((err, n)) = common::fd_max_error(&mut inst) {
            assert!(err < 1e-4, "seed {seed} ({variant}): relative error {err}");
            checked += n;
            seen[(variant == Variant::MicoQ) as usize] = true;
            shared |= share;
        }
    }
    assert!(seen[0] && seen[1] && shared);
    assert!(checked > 10_000, "only {checked} parameters checked");
}
