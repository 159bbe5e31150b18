//! Every tape primitive against central finite differences.

use diffmath::gradcheck::check_primitives;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn all_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let outcomes = check_primitives(100, &mut rng).unwrap();
    assert!(outcomes.len() >= 30);
    for o in &outcomes {
        assert_eq!(o.instances, 100);
        assert!(o.worst < 1e-4, "{}: worst relative error {:e}", o.name, o.worst);
    }
}
