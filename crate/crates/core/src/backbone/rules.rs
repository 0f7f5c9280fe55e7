use std::collections::{BTreeSet, HashMap};

use crate::diff::Rulebook;
use crate::pointops::VoxelGridSpec;

/// Sparse convolution flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Stride 1; output sites are exactly the input sites.
    Submanifold,
    /// Stride 2; output sites are `⌊c / 2⌋` of the input sites.
    Regular,
}

/// Rulebook of a stride-1 submanifold convolution over `coords`.
pub fn submanifold_rules(coords: &[[u32; 3]]) -> Rulebook {
    let index: HashMap<[u32; 3], u32> = coords.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
    let mut pairs = vec![Vec::new(); 27];
    for (o, c) in coords.iter().enumerate() {
        for a in 0..3u32 {
            for b in 0..3u32 {
                for d in 0..3u32 {
                    // input = output + tap - 1
                    let (Some(x), Some(y), Some(z)) = ((c[0] + a).checked_sub(1), (c[1] + b).checked_sub(1), (c[2] + d).checked_sub(1))
                    else {
                        continue;
                    };
                    if let Some(&i) = index.get(&[x, y, z]) {
                        pairs[((a * 3 + b) * 3 + d) as usize].push((i, o as u32));
                    }
                }
            }
        }
    }
    Rulebook { n_in: coords.len(), n_out: coords.len(), pairs }
}

/// Rulebook of a stride-2, padding-1 regular convolution.
///
/// Output sites are the distinct `⌊c / 2⌋` of the inputs; each output site
/// then gathers from every occupied input within its 3³ window, matching a
/// dense stride-2 convolution evaluated at those sites.
pub fn downsample_rules(coords: &[[u32; 3]], spec: &VoxelGridSpec) -> (Vec<[u32; 3]>, VoxelGridSpec, Rulebook) {
    let out_spec = spec.downsampled();
    let out: Vec<[u32; 3]> = coords.iter().map(|c| c.map(|v| v / 2)).collect::<BTreeSet<_>>().into_iter().collect();
    let out_index: HashMap<[u32; 3], u32> = out.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
    let mut pairs = vec![Vec::new(); 27];
    for (i, c) in coords.iter().enumerate() {
        // input = 2·output + tap - 1  ⇒  output = (input + 1 - tap) / 2
        let cand = |v: u32, t: u32| -> Option<u32> {
            let s = (v + 1).checked_sub(t)?;
            (s % 2 == 0).then_some(s / 2)
        };
        for a in 0..3u32 {
            let Some(x) = cand(c[0], a) else { continue };
            for b in 0..3u32 {
                let Some(y) = cand(c[1], b) else { continue };
                for d in 0..3u32 {
                    let Some(z) = cand(c[2], d) else { continue };
                    if let Some(&o) = out_index.get(&[x, y, z]) {
                        pairs[((a * 3 + b) * 3 + d) as usize].push((i as u32, o));
                    }
                }
            }
        }
    }
    let n_out = out.len();
    (out, out_spec, Rulebook { n_in: coords.len(), n_out, pairs })
}
