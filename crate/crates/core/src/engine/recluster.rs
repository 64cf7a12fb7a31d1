//! k-medoids repartition of all particles followed by the mass-preserving
//! reweighting: `π'ⱼ = Σ_{i∈Cⱼ} π_{cᵢ}wᵢ` and `wᵢ ← π_{cᵢ}wᵢ / π'ⱼ`.

use crate::belief::{weighted_moments, MixtureBelief, MixtureComponent, Particle, ZERO_WEIGHT_FLOOR};
use crate::error::Result;
use crate::linalg::euclidean_sq;
use crate::scalar::Scalar;

pub const KMEDOIDS_MAX_ITERS: usize = 50;

struct Atom<'a, S: Scalar> {
    particle: &'a Particle<S>,
    pi: S,
}

fn distance<S: Scalar>(a: &Particle<S>, b: &Particle<S>) -> S {
    euclidean_sq(&a.state, &b.state).sqrt()
}

/// Index of the nearest medoid; ties go to the lowest medoid index.
fn nearest<S: Scalar>(atoms: &[Atom<'_, S>], medoids: &[usize], i: usize) -> usize {
    let mut best = 0;
    let mut best_d = S::lit(f64::INFINITY);
    for (j, &m) in medoids.iter().enumerate() {
        let d = distance(atoms[i].particle, atoms[m].particle);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn initial_medoids<S: Scalar>(belief: &MixtureBelief<S>, atoms: &[Atom<'_, S>]) -> Vec<usize> {
    let mut medoids: Vec<usize> = Vec::with_capacity(belief.len());
    let mut offset = 0;
    for c in &belief.components {
        let range = offset..offset + c.len();
        offset += c.len();
        let mean = weighted_moments(c.particles.iter().map(|p| (&p.state, p.weight)))
            .or_else(|_| weighted_moments(c.particles.iter().map(|p| (&p.state, S::one()))))
            .ok()
            .map(|m| m.mean);
        let usable = |i: &usize| {
            !medoids
                .iter()
                .any(|&m| atoms[m].particle.state == atoms[*i].particle.state)
        };
        let pick = |candidates: &mut dyn Iterator<Item = usize>| -> Option<usize> {
            let mut best: Option<(usize, S)> = None;
            for i in candidates {
                let d = match &mean {
                    Some(mu) => euclidean_sq(&atoms[i].particle.state, mu),
                    None => S::zero(),
                };
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            best.map(|(i, _)| i)
        };
        let own = pick(&mut range.clone().filter(usable));
        let chosen = own.or_else(|| pick(&mut (0..atoms.len()).filter(usable)));
        if let Some(i) = chosen {
            medoids.push(i);
        }
    }
    medoids
}

/// Alternating k-medoids with `k` = current component count. Returns the
/// final medoids and the cluster index of every atom.
fn kmedoids<S: Scalar>(atoms: &[Atom<'_, S>], mut medoids: Vec<usize>) -> (Vec<usize>, Vec<usize>) {
    let mut assignment: Vec<usize> = (0..atoms.len()).map(|i| nearest(atoms, &medoids, i)).collect();
    for _ in 0..KMEDOIDS_MAX_ITERS {
        let mut changed = false;
        for (j, medoid) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..atoms.len()).filter(|&i| assignment[i] == j).collect();
            let mut best = *medoid;
            let mut best_cost = members
                .iter()
                .fold(S::zero(), |a, &i| a + distance(atoms[*medoid].particle, atoms[i].particle));
            for &c in &members {
                let cost = members
                    .iter()
                    .fold(S::zero(), |a, &i| a + distance(atoms[c].particle, atoms[i].particle));
                if cost < best_cost || (cost == best_cost && c < best) {
                    best_cost = cost;
                    best = c;
                }
            }
            if best != *medoid {
                *medoid = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        assignment = (0..atoms.len()).map(|i| nearest(atoms, &medoids, i)).collect();
    }
    (medoids, assignment)
}

/// Repartitions particles among the current components and redistributes
/// weights so every atom keeps its mixture mass `π_c·w`.
///
/// Components whose cluster ends up empty (or massless) are dissolved; their
/// ids are returned. Component ids follow the medoid seeded from them.
pub fn recluster<S: Scalar>(belief: &MixtureBelief<S>) -> Result<(MixtureBelief<S>, Vec<usize>)> {
    if belief.len() <= 1 {
        return Ok((belief.clone(), Vec::new()));
    }
    let atoms: Vec<Atom<'_, S>> = belief
        .components
        .iter()
        .flat_map(|c| c.particles.iter().map(move |p| Atom { particle: p, pi: c.pi }))
        .collect();
    let medoids = initial_medoids(belief, &atoms);
    let (_, assignment) = kmedoids(&atoms, medoids.clone());

    let k = medoids.len();
    let unchanged = k == belief.len()
        && belief
            .components
            .iter()
            .enumerate()
            .flat_map(|(j, c)| std::iter::repeat_n(j, c.len()))
            .eq(assignment.iter().copied());
    if unchanged {
        return Ok((belief.clone(), Vec::new()));
    }
    let mut mass = vec![S::zero(); k];
    for (atom, &j) in atoms.iter().zip(&assignment) {
        mass[j] += atom.pi * atom.particle.weight;
    }

    let mut out = belief.clone();
    let mut components = Vec::with_capacity(k);
    let mut dissolved = Vec::new();
    for (j, source) in belief.components.iter().enumerate() {
        let Some(&total) = mass.get(j) else {
            dissolved.push(source.id);
            continue;
        };
        if !(total > S::lit(ZERO_WEIGHT_FLOOR)) {
            dissolved.push(source.id);
            continue;
        }
        let particles: Vec<Particle<S>> = atoms
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == j)
            .map(|(atom, _)| {
                let mut p = atom.particle.clone();
                p.weight = atom.pi * p.weight / total;
                p.component_id = source.id;
                p
            })
            .collect();
        components.push(MixtureComponent {
            id: source.id,
            pi: total,
            particles,
            evidence: source.evidence,
        });
    }
    out.components = components;
    if !dissolved.is_empty() {
        out.renormalize_pis();
    }
    Ok((out, dissolved))
}
