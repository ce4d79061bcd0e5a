use geld_web::{generate_points, improve_tour, length_of, solve_tour};

fn permutation(order: &[u32], n: usize) -> bool {
    let mut seen = vec![false; n];
    order.len() == n && order.iter().all(|&i| (i as usize) < n && !std::mem::replace(&mut seen[i as usize], true))
}

#[test]
fn generate_is_seeded_and_in_unit_square() {
    let a = generate_points("clustered", 50, 3).unwrap();
    assert_eq!(a.len(), 100);
    assert_eq!(a, generate_points("clustered", 50, 3).unwrap());
    assert_ne!(a, generate_points("clustered", 50, 4).unwrap());
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn every_method_returns_a_permutation() {
    let pts = generate_points("uniform", 80, 1).unwrap();
    for m in ["nn", "nn2opt", "ri", "ri2opt"] {
        let t = solve_tour(&pts, m, 9).unwrap();
        assert!(permutation(&t, 80), "{m}");
    }
}

#[test]
fn improve_never_lengthens() {
    let pts = generate_points("uniform", 120, 2).unwrap();
    let t = solve_tour(&pts, "ri", 5).unwrap();
    let before = length_of(&pts, &t).unwrap();
    let u = improve_tour(&pts, &t, 10, 5).unwrap();
    assert!(permutation(&u, 120));
    assert!(length_of(&pts, &u).unwrap() <= before);
}

#[test]
fn square_length_is_four() {
    let pts = [0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
    assert!((length_of(&pts, &[0, 1, 2, 3]).unwrap() - 4.0).abs() < 1e-12);
}

#[test]
fn bad_input_is_reported() {
    assert!(generate_points("spiral", 10, 0).is_err());
    assert!(solve_tour(&[0.0, 0.0, 1.0], "nn", 0).is_err());
    let pts = generate_points("uniform", 10, 0).unwrap();
    assert!(solve_tour(&pts, "lkh", 0).is_err());
    assert!(improve_tour(&pts, &[0, 1, 2], 1, 0).is_err());
}
