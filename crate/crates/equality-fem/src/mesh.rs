//! Conforming 2D triangulations with region labels and boundary-part tags:
//! structured generation, uniform red refinement, and red-green adaptive
//! refinement without hanging nodes.
//!
//! The refinement state is a forest of red refinements. Leaves carry the mesh;
//! a leaf with one subdivided edge is completed by a green bisection pair in
//! the conforming view. Marking either green child dissolves the pair: the red
//! parent is refined instead, so repeated refinement cannot degrade shape
//! regularity. Vertices are deduplicated by index bookkeeping (the midpoint
//! map), never by coordinate comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("triangle {index} is degenerate or negatively oriented (signed area {area:.3e})")]
    DegenerateTriangle { index: usize, area: f64 },
    #[error("mesh is not conforming: {0}")]
    NonConforming(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
    Robin,
}

impl BoundaryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundaryKind::Dirichlet => "dirichlet",
            BoundaryKind::Neumann => "neumann",
            BoundaryKind::Robin => "robin",
        }
    }
}

/// Boundary condition tag: the kind plus a free part label so problems can
/// address boundary pieces individually.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryTag {
    pub kind: BoundaryKind,
    pub part: u32,
}

impl BoundaryTag {
    pub fn dirichlet(part: u32) -> Self {
        Self { kind: BoundaryKind::Dirichlet, part }
    }
    pub fn neumann(part: u32) -> Self {
        Self { kind: BoundaryKind::Neumann, part }
    }
    pub fn robin(part: u32) -> Self {
        Self { kind: BoundaryKind::Robin, part }
    }
}

/// Which way the structured grid cells are split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diagonal {
    /// From (i, j) to (i+1, j+1); aligns edges with the line x1 = x2.
    Main,
    /// From (i+1, j) to (i, j+1).
    Anti,
}

/// Red-forest leaf: an undivided red triangle.
#[derive(Debug, Clone, Copy)]
struct Leaf {
    v: [usize; 3],
    region: u32,
}

fn ekey(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Conforming triangulation. Immutable; refinement returns a new mesh.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    regions: Vec<u32>,
    edges: Vec<[usize; 2]>,
    /// Per triangle: (edge index, sign) for local edges (v0,v1), (v1,v2), (v2,v0);
    /// sign +1 when the traversal runs from the smaller to the larger vertex id.
    tri_edges: Vec<[(usize, i8); 3]>,
    /// Per edge: boundary tag, set exactly on boundary edges.
    boundary: Vec<Option<BoundaryTag>>,
    /// Per conforming triangle: the red leaf it came from (green pairs share one).
    tri_leaf: Vec<usize>,
    /// Per conforming triangle: whether it is a green completion child.
    is_green: Vec<bool>,
    leaves: Vec<Leaf>,
    midpoints: BTreeMap<(usize, usize), usize>,
    boundary_subedges: BTreeMap<(usize, usize), BoundaryTag>,
}

impl Mesh {
    // ----- construction -------------------------------------------------

    /// Structured triangulation of the unit square: (nx+1)(ny+1) vertices and
    /// 2 nx ny triangles. Region labels are sampled at centroids, boundary
    /// tags at boundary edge midpoints.
    pub fn rect_structured(
        nx: usize,
        ny: usize,
        diagonal: Diagonal,
        region_fn: impl Fn([f64; 2]) -> u32,
        boundary_fn: impl Fn([f64; 2]) -> BoundaryTag,
    ) -> Result<Mesh, MeshError> {
        if nx == 0 || ny == 0 {
            return Err(MeshError::InvalidArgument("rect_structured needs nx, ny >= 1".into()));
        }
        let vid = |i: usize, j: usize| j * (nx + 1) + i;
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push([i as f64 / nx as f64, j as f64 / ny as f64]);
            }
        }
        let mut tris = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (v00, v10, v01, v11) = (vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1));
                match diagonal {
                    Diagonal::Main => {
                        tris.push([v00, v10, v11]);
                        tris.push([v00, v11, v01]);
                    }
                    Diagonal::Anti => {
                        tris.push([v00, v10, v01]);
                        tris.push([v10, v11, v01]);
                    }
                }
            }
        }
        Self::from_roots(vertices, tris, &region_fn, &boundary_fn)
    }

    /// Structured triangulation of the L-shape (0,1)^2 minus [1/2,1]x[0,1/2],
    /// main diagonal, 2 * (3/4) * n^2 triangles. All boundary edges are tagged
    /// Dirichlet (part 0). `n` must be even so the re-entrant corner lies on
    /// grid lines.
    pub fn lshape_structured(n: usize) -> Result<Mesh, MeshError> {
        if n < 2 || n % 2 != 0 {
            return Err(MeshError::InvalidArgument(format!(
                "lshape_structured needs even n >= 2, got {n}"
            )));
        }
        let mut vid_map: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut vertices = Vec::new();
        let mut tris = Vec::new();
        let h = 1.0 / n as f64;
        for j in 0..n {
            for i in 0..n {
                if i >= n / 2 && j < n / 2 {
                    continue;
                }
                let mut vid = |i: usize, j: usize| {
                    *vid_map.entry((i, j)).or_insert_with(|| {
                        vertices.push([i as f64 * h, j as f64 * h]);
                        vertices.len() - 1
                    })
                };
                let (v00, v10, v01, v11) = (vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1));
                tris.push([v00, v10, v11]);
                tris.push([v00, v11, v01]);
            }
        }
        Self::from_roots(vertices, tris, &|_| 0, &|_| BoundaryTag::dirichlet(0))
    }

    /// Builds a mesh treating the given triangles as red roots.
    fn from_roots(
        vertices: Vec<[f64; 2]>,
        tris: Vec<[usize; 3]>,
        region_fn: &dyn Fn([f64; 2]) -> u32,
        boundary_fn: &dyn Fn([f64; 2]) -> BoundaryTag,
    ) -> Result<Mesh, MeshError> {
        let leaves: Vec<Leaf> = tris
            .iter()
            .map(|&v| {
                let c = centroid(&vertices, v);
                Leaf { v, region: region_fn(c) }
            })
            .collect();
        // tag boundary edges (incidence count 1) at their midpoints
        let mut incidence: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for t in &tris {
            for k in 0..3 {
                *incidence.entry(ekey(t[k], t[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        let mut boundary_subedges = BTreeMap::new();
        for (&(a, b), &count) in &incidence {
            if count == 1 {
                let m = [
                    0.5 * (vertices[a][0] + vertices[b][0]),
                    0.5 * (vertices[a][1] + vertices[b][1]),
                ];
                boundary_subedges.insert((a, b), boundary_fn(m));
            } else if count > 2 {
                return Err(MeshError::NonConforming(format!(
                    "edge ({a}, {b}) borders {count} triangles"
                )));
            }
        }
        Self::assemble(vertices, leaves, BTreeMap::new(), boundary_subedges)
    }

    /// Derives the conforming view (green completion, edges, tags) from the
    /// refinement state.
    fn assemble(
        vertices: Vec<[f64; 2]>,
        leaves: Vec<Leaf>,
        midpoints: BTreeMap<(usize, usize), usize>,
        boundary_subedges: BTreeMap<(usize, usize), BoundaryTag>,
    ) -> Result<Mesh, MeshError> {
        let mut triangles = Vec::with_capacity(leaves.len());
        let mut regions = Vec::with_capacity(leaves.len());
        let mut tri_leaf = Vec::with_capacity(leaves.len());
        let mut is_green = Vec::with_capacity(leaves.len());
        for (li, leaf) in leaves.iter().enumerate() {
            let [a, b, c] = leaf.v;
            let mids = [
                midpoints.get(&ekey(a, b)).copied(),
                midpoints.get(&ekey(b, c)).copied(),
                midpoints.get(&ekey(c, a)).copied(),
            ];
            let split_count = mids.iter().flatten().count();
            match split_count {
                0 => {
                    triangles.push(leaf.v);
                    regions.push(leaf.region);
                    tri_leaf.push(li);
                    is_green.push(false);
                }
                1 => {
                    // green bisection from the midpoint to the opposite vertex
                    let pair = if let Some(m) = mids[0] {
                        [[a, m, c], [m, b, c]]
                    } else if let Some(m) = mids[1] {
                        [[b, m, a], [m, c, a]]
                    } else {
                        let m = mids[2].unwrap();
                        [[c, m, b], [m, a, b]]
                    };
                    for t in pair {
                        triangles.push(t);
                        regions.push(leaf.region);
                        tri_leaf.push(li);
                        is_green.push(true);
                    }
                }
                _ => {
                    return Err(MeshError::NonConforming(format!(
                        "leaf {li} has {split_count} subdivided edges after closure"
                    )))
                }
            }
        }

        // canonical edge list: lexicographically sorted unique pairs
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(3 * triangles.len());
        for t in &triangles {
            for k in 0..3 {
                pairs.push(ekey(t[k], t[(k + 1) % 3]));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let edge_index: BTreeMap<(usize, usize), usize> =
            pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let edges: Vec<[usize; 2]> = pairs.iter().map(|&(a, b)| [a, b]).collect();

        let mut incidence = vec![0usize; edges.len()];
        let mut tri_edges = Vec::with_capacity(triangles.len());
        for (ti, t) in triangles.iter().enumerate() {
            let mut te = [(0usize, 0i8); 3];
            for k in 0..3 {
                let (from, to) = (t[k], t[(k + 1) % 3]);
                let e = edge_index[&ekey(from, to)];
                te[k] = (e, if from < to { 1 } else { -1 });
                incidence[e] += 1;
            }
            tri_edges.push(te);
            let area = signed_area(&vertices, *t);
            if area <= 0.0 || !area.is_finite() {
                return Err(MeshError::DegenerateTriangle { index: ti, area });
            }
        }

        let mut boundary = vec![None; edges.len()];
        for (e, count) in incidence.iter().enumerate() {
            let key = (edges[e][0], edges[e][1]);
            match count {
                1 => match boundary_subedges.get(&key) {
                    Some(&tag) => boundary[e] = Some(tag),
                    None => {
                        return Err(MeshError::NonConforming(format!(
                            "boundary edge ({}, {}) has no tag (hanging node?)",
                            key.0, key.1
                        )))
                    }
                },
                2 => {}
                n => {
                    return Err(MeshError::NonConforming(format!(
                        "edge ({}, {}) borders {n} triangles",
                        key.0, key.1
                    )))
                }
            }
        }

        Ok(Mesh {
            vertices,
            triangles,
            regions,
            edges,
            tri_edges,
            boundary,
            tri_leaf,
            is_green,
            leaves,
            midpoints,
            boundary_subedges,
        })
    }

    // ----- accessors -----------------------------------------------------

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }
    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }
    pub fn regions(&self) -> &[u32] {
        &self.regions
    }
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }
    pub fn tri_edges(&self) -> &[[(usize, i8); 3]] {
        &self.tri_edges
    }
    pub fn boundary_tag(&self, edge: usize) -> Option<BoundaryTag> {
        self.boundary[edge]
    }
    pub fn is_boundary_edge(&self, edge: usize) -> bool {
        self.boundary[edge].is_some()
    }
    pub fn is_green(&self, tri: usize) -> bool {
        self.is_green[tri]
    }

    /// Boundary edge indices, ascending.
    pub fn boundary_edges(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_edges()).filter(|&e| self.boundary[e].is_some())
    }

    // ----- refinement ----------------------------------------------------

    /// Red refinement of every conforming triangle: element count exactly x4,
    /// regions and boundary tags inherited. The result carries a fresh red
    /// forest rooted at the children.
    pub fn uniform_refine(&self) -> Result<Mesh, MeshError> {
        let mut state = RefineState {
            vertices: self.vertices.clone(),
            midpoints: BTreeMap::new(),
            boundary_subedges: self.boundary_subedges.clone(),
        };
        let mut leaves = Vec::with_capacity(4 * self.triangles.len());
        for (t, tri) in self.triangles.iter().enumerate() {
            let leaf = Leaf { v: *tri, region: self.regions[t] };
            leaves.extend_from_slice(&state.red_split(&leaf));
        }
        Self::assemble(state.vertices, leaves, BTreeMap::new(), state.boundary_subedges)
    }

    /// Red refinement of the marked triangles with conforming green closure.
    /// Marking a green child dissolves its pair: the red parent is refined.
    /// An empty set returns the mesh unchanged.
    pub fn refine_marked(&self, marked: &MarkedSet) -> Result<Mesh, MeshError> {
        if let Some(&worst) = marked.indices().iter().max() {
            if worst >= self.n_triangles() {
                return Err(MeshError::InvalidArgument(format!(
                    "marked triangle {worst} out of range ({} triangles)",
                    self.n_triangles()
                )));
            }
        } else {
            return Ok(self.clone());
        }
        let mut state = RefineState {
            vertices: self.vertices.clone(),
            midpoints: self.midpoints.clone(),
            boundary_subedges: self.boundary_subedges.clone(),
        };
        let mut leaves = self.leaves.clone();
        let mut alive = vec![true; leaves.len()];

        // conforming marks -> leaf marks (this is where green pairs dissolve)
        let mut schedule: Vec<usize> = marked.indices().iter().map(|&t| self.tri_leaf[t]).collect();
        schedule.sort_unstable();
        schedule.dedup();

        loop {
            for &li in &schedule {
                alive[li] = false;
                let children = state.red_split(&leaves[li]);
                for ch in children {
                    leaves.push(ch);
                    alive.push(true);
                }
            }
            // closure: a leaf needing more than a single green fix goes red
            schedule.clear();
            for (li, leaf) in leaves.iter().enumerate() {
                if !alive[li] {
                    continue;
                }
                let [a, b, c] = leaf.v;
                let mut split_edges = 0;
                let mut deep = false;
                for (p, q) in [(a, b), (b, c), (c, a)] {
                    if let Some(&m) = state.midpoints.get(&ekey(p, q)) {
                        split_edges += 1;
                        if state.midpoints.contains_key(&ekey(p, m))
                            || state.midpoints.contains_key(&ekey(m, q))
                        {
                            deep = true;
                        }
                    }
                }
                if split_edges >= 2 || deep {
                    schedule.push(li);
                }
            }
            if schedule.is_empty() {
                break;
            }
        }

        let live: Vec<Leaf> =
            leaves.iter().zip(&alive).filter(|(_, &a)| a).map(|(l, _)| *l).collect();
        Self::assemble(state.vertices, live, state.midpoints, state.boundary_subedges)
    }

    // ----- geometry --------------------------------------------------------

    pub fn geometry(&self) -> Result<Geometry, MeshError> {
        let mut areas = Vec::with_capacity(self.n_triangles());
        let mut bary_grads = Vec::with_capacity(self.n_triangles());
        for (t, tri) in self.triangles.iter().enumerate() {
            let area = signed_area(&self.vertices, *tri);
            if area <= 0.0 || !area.is_finite() {
                return Err(MeshError::DegenerateTriangle { index: t, area });
            }
            areas.push(area);
            let [a, b, c] = tri.map(|v| self.vertices[v]);
            let det = 2.0 * area;
            bary_grads.push([
                [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
                [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
                [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
            ]);
        }
        let mut edge_lengths = Vec::with_capacity(self.n_edges());
        for e in &self.edges {
            let (a, b) = (self.vertices[e[0]], self.vertices[e[1]]);
            edge_lengths.push(((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt());
        }
        // outward unit normals on boundary edges
        let mut owner = vec![usize::MAX; self.n_edges()];
        for (t, te) in self.tri_edges.iter().enumerate() {
            for &(e, _) in te {
                if self.boundary[e].is_some() {
                    owner[e] = t;
                }
            }
        }
        let mut boundary_normals = vec![None; self.n_edges()];
        for e in 0..self.n_edges() {
            if self.boundary[e].is_none() {
                continue;
            }
            let [lo, hi] = self.edges[e];
            let (a, b) = (self.vertices[lo], self.vertices[hi]);
            let len = edge_lengths[e];
            let mut n = [(b[1] - a[1]) / len, -(b[0] - a[0]) / len];
            let tvs = self.triangles[owner[e]];
            let cen = centroid(&self.vertices, tvs);
            let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
            if n[0] * (cen[0] - mid[0]) + n[1] * (cen[1] - mid[1]) > 0.0 {
                n = [-n[0], -n[1]];
            }
            boundary_normals[e] = Some(n);
        }
        Ok(Geometry { areas, edge_lengths, bary_grads, boundary_normals })
    }

    /// Structural conformity: positive areas, each edge bordering one (tagged
    /// boundary) or two (untagged interior) triangles. A hanging node would
    /// surface as an untagged single-incidence edge.
    pub fn check_conformity(&self) -> Result<(), MeshError> {
        let mut incidence = vec![0usize; self.n_edges()];
        for te in &self.tri_edges {
            for &(e, _) in te {
                incidence[e] += 1;
            }
        }
        for (e, &count) in incidence.iter().enumerate() {
            let tagged = self.boundary[e].is_some();
            match (count, tagged) {
                (1, true) | (2, false) => {}
                _ => {
                    return Err(MeshError::NonConforming(format!(
                        "edge {e} has incidence {count}, tagged: {tagged}"
                    )))
                }
            }
        }
        self.geometry().map(|_| ())
    }

    // ----- plain-text serialization ---------------------------------------

    /// Three-section plain-text form: VERTICES (x y), TRIANGLES (v0 v1 v2
    /// region), BOUNDARY (lo hi kind part).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "VERTICES {}", self.n_vertices());
        for v in &self.vertices {
            let _ = writeln!(s, "{:.17e} {:.17e}", v[0], v[1]);
        }
        let _ = writeln!(s, "TRIANGLES {}", self.n_triangles());
        for (t, tri) in self.triangles.iter().enumerate() {
            let _ = writeln!(s, "{} {} {} {}", tri[0], tri[1], tri[2], self.regions[t]);
        }
        let count = self.boundary_edges().count();
        let _ = writeln!(s, "BOUNDARY {count}");
        for e in self.boundary_edges() {
            let tag = self.boundary[e].unwrap();
            let _ = writeln!(
                s,
                "{} {} {} {}",
                self.edges[e][0],
                self.edges[e][1],
                tag.kind.as_str(),
                tag.part
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mesh, MeshError> {
        let mut lines = text.lines().enumerate();
        let mut next_nonempty = |lines: &mut std::iter::Enumerate<std::str::Lines>| loop {
            match lines.next() {
                Some((ln, raw)) => {
                    let s = raw.trim();
                    if !s.is_empty() {
                        return Some((ln + 1, s.to_string()));
                    }
                }
                None => return None,
            }
        };
        let parse_header = |line: Option<(usize, String)>, want: &str| -> Result<(usize, usize), MeshError> {
            let (ln, s) = line.ok_or(MeshError::Parse {
                line: 0,
                message: format!("missing {want} section"),
            })?;
            let mut it = s.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(h), Some(n), None) if h == want => n.parse::<usize>().map(|n| (ln, n)).map_err(|_| {
                    MeshError::Parse { line: ln, message: format!("bad {want} count `{n}`") }
                }),
                _ => Err(MeshError::Parse {
                    line: ln,
                    message: format!("expected `{want} <count>`, got `{s}`"),
                }),
            }
        };

        let (_, nv) = parse_header(next_nonempty(&mut lines), "VERTICES")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, s) = next_nonempty(&mut lines).ok_or(MeshError::Parse {
                line: 0,
                message: "unexpected end of file in VERTICES".into(),
            })?;
            let nums: Vec<f64> = s.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if nums.len() != 2 || s.split_whitespace().count() != 2 {
                return Err(MeshError::Parse { line: ln, message: format!("expected `x y`, got `{s}`") });
            }
            vertices.push([nums[0], nums[1]]);
        }

        let (_, nt) = parse_header(next_nonempty(&mut lines), "TRIANGLES")?;
        let mut tris = Vec::with_capacity(nt);
        let mut regions = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, s) = next_nonempty(&mut lines).ok_or(MeshError::Parse {
                line: 0,
                message: "unexpected end of file in TRIANGLES".into(),
            })?;
            let nums: Vec<usize> = s.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if nums.len() != 4 || s.split_whitespace().count() != 4 {
                return Err(MeshError::Parse {
                    line: ln,
                    message: format!("expected `v0 v1 v2 region`, got `{s}`"),
                });
            }
            if nums[..3].iter().any(|&v| v >= nv) {
                return Err(MeshError::Parse { line: ln, message: format!("vertex index out of range in `{s}`") });
            }
            tris.push([nums[0], nums[1], nums[2]]);
            regions.push(nums[3] as u32);
        }

        let (_, nb) = parse_header(next_nonempty(&mut lines), "BOUNDARY")?;
        let mut tags: BTreeMap<(usize, usize), BoundaryTag> = BTreeMap::new();
        for _ in 0..nb {
            let (ln, s) = next_nonempty(&mut lines).ok_or(MeshError::Parse {
                line: 0,
                message: "unexpected end of file in BOUNDARY".into(),
            })?;
            let toks: Vec<&str> = s.split_whitespace().collect();
            if toks.len() != 4 {
                return Err(MeshError::Parse {
                    line: ln,
                    message: format!("expected `lo hi kind part`, got `{s}`"),
                });
            }
            let lo: usize = toks[0].parse().map_err(|_| MeshError::Parse {
                line: ln,
                message: format!("bad vertex id `{}`", toks[0]),
            })?;
            let hi: usize = toks[1].parse().map_err(|_| MeshError::Parse {
                line: ln,
                message: format!("bad vertex id `{}`", toks[1]),
            })?;
            let kind = match toks[2] {
                "dirichlet" => BoundaryKind::Dirichlet,
                "neumann" => BoundaryKind::Neumann,
                "robin" => BoundaryKind::Robin,
                other => {
                    return Err(MeshError::Parse {
                        line: ln,
                        message: format!("unknown boundary kind `{other}`"),
                    })
                }
            };
            let part: u32 = toks[3].parse().map_err(|_| MeshError::Parse {
                line: ln,
                message: format!("bad part label `{}`", toks[3]),
            })?;
            tags.insert(ekey(lo, hi), BoundaryTag { kind, part });
        }
        if let Some((ln, s)) = next_nonempty(&mut lines) {
            return Err(MeshError::Parse { line: ln, message: format!("trailing content `{s}`") });
        }

        let leaves: Vec<Leaf> =
            tris.iter().zip(&regions).map(|(&v, &region)| Leaf { v, region }).collect();
        Self::assemble(vertices, leaves, BTreeMap::new(), tags)
    }
}

/// Shared mutable pieces during a refinement pass.
struct RefineState {
    vertices: Vec<[f64; 2]>,
    midpoints: BTreeMap<(usize, usize), usize>,
    boundary_subedges: BTreeMap<(usize, usize), BoundaryTag>,
}

impl RefineState {
    fn midpoint(&mut self, a: usize, b: usize) -> usize {
        let key = ekey(a, b);
        if let Some(&m) = self.midpoints.get(&key) {
            return m;
        }
        let (pa, pb) = (self.vertices[a], self.vertices[b]);
        self.vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
        let m = self.vertices.len() - 1;
        self.midpoints.insert(key, m);
        if let Some(tag) = self.boundary_subedges.remove(&key) {
            self.boundary_subedges.insert(ekey(key.0, m), tag);
            self.boundary_subedges.insert(ekey(m, key.1), tag);
        }
        m
    }

    fn red_split(&mut self, leaf: &Leaf) -> [Leaf; 4] {
        let [a, b, c] = leaf.v;
        let mab = self.midpoint(a, b);
        let mbc = self.midpoint(b, c);
        let mca = self.midpoint(c, a);
        let r = leaf.region;
        [
            Leaf { v: [a, mab, mca], region: r },
            Leaf { v: [mab, b, mbc], region: r },
            Leaf { v: [mca, mbc, c], region: r },
            Leaf { v: [mab, mbc, mca], region: r },
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Geometry {
    pub areas: Vec<f64>,
    pub edge_lengths: Vec<f64>,
    /// Gradients of the three barycentric coordinates per triangle.
    pub bary_grads: Vec<[[f64; 2]; 3]>,
    /// Outward unit normal per boundary edge, `None` on interior edges.
    pub boundary_normals: Vec<Option<[f64; 2]>>,
}

fn signed_area(vertices: &[[f64; 2]], t: [usize; 3]) -> f64 {
    let [a, b, c] = t.map(|v| vertices[v]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn centroid(vertices: &[[f64; 2]], t: [usize; 3]) -> [f64; 2] {
    let [a, b, c] = t.map(|v| vertices[v]);
    [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
}

/// Validated set of triangle indices to refine.
#[derive(Debug, Clone)]
pub struct MarkedSet {
    indices: Vec<usize>,
}

impl MarkedSet {
    /// Deduplicates and sorts; indices are validated against the mesh by
    /// `refine_marked`.
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Marks ceil(fraction * len) elements with the largest values; ties broken by
/// ascending element index.
pub fn mark_fixed_fraction(values: &[f64], fraction: f64) -> Result<MarkedSet, MeshError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MeshError::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MeshError::InvalidArgument("indicator values must be finite and >= 0".into()));
    }
    let count = ((fraction * values.len() as f64).ceil() as usize).min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j].partial_cmp(&values[i]).expect("finite values").then(i.cmp(&j))
    });
    Ok(MarkedSet::new(order[..count].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square(n: usize) -> Mesh {
        Mesh::rect_structured(n, n, Diagonal::Main, |_| 0, |_| BoundaryTag::dirichlet(0)).unwrap()
    }

    fn total_area(mesh: &Mesh) -> f64 {
        crate::sparse::pairwise_sum(&mesh.geometry().unwrap().areas)
    }

    #[test]
    fn smallest_rect_mesh_counts() {
        let m = unit_square(1);
        assert_eq!(m.n_triangles(), 2);
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(m.n_edges(), 5);
        m.check_conformity().unwrap();
    }

    #[test]
    fn rect_20_counts_match_euler() {
        let m = unit_square(20);
        assert_eq!(m.n_triangles(), 800);
        assert_eq!(m.n_vertices(), 441);
        assert_eq!(m.n_edges(), 1240); // (3*800 + 80) / 2
        assert!((total_area(&m) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn main_diagonal_aligns_with_x1_eq_x2() {
        let m = unit_square(4);
        let on_diag = m
            .edges()
            .iter()
            .filter(|e| {
                let (a, b) = (m.vertices()[e[0]], m.vertices()[e[1]]);
                (a[0] - a[1]).abs() < 1e-15 && (b[0] - b[1]).abs() < 1e-15
            })
            .count();
        assert_eq!(on_diag, 4);
    }

    #[test]
    fn region_and_boundary_callables_sampled() {
        let m = Mesh::rect_structured(
            2,
            2,
            Diagonal::Main,
            |c| if c[0] > c[1] { 1 } else { 2 },
            |mid| {
                if mid[0] < 1e-12 {
                    BoundaryTag::robin(3)
                } else {
                    BoundaryTag::neumann(1)
                }
            },
        )
        .unwrap();
        for (t, tri) in m.triangles().iter().enumerate() {
            let c = centroid(m.vertices(), *tri);
            assert_eq!(m.regions()[t], if c[0] > c[1] { 1 } else { 2 });
        }
        let mut robin = 0;
        let mut neumann = 0;
        for e in m.boundary_edges() {
            match m.boundary_tag(e).unwrap().kind {
                BoundaryKind::Robin => robin += 1,
                BoundaryKind::Neumann => neumann += 1,
                _ => panic!("unexpected tag"),
            }
        }
        assert_eq!(robin, 2);
        assert_eq!(neumann, 6);
    }

    #[test]
    fn lshape_counts() {
        let m = Mesh::lshape_structured(8).unwrap();
        assert_eq!(m.n_triangles(), 96);
        m.check_conformity().unwrap();
        assert!((total_area(&m) - 0.75).abs() < 1e-13);
        let m2 = Mesh::lshape_structured(2).unwrap();
        assert_eq!(m2.n_triangles(), 6);
        // V - E + T = 1 for a simply connected mesh with one boundary loop
        let euler = m2.n_vertices() as i64 - m2.n_edges() as i64 + m2.n_triangles() as i64;
        assert_eq!(euler, 1);
        assert!(Mesh::lshape_structured(3).is_err());
        assert!(Mesh::lshape_structured(0).is_err());
    }

    #[test]
    fn uniform_refine_x4_and_conforming() {
        let mut m = unit_square(20);
        for expect in [3200, 12800] {
            m = m.uniform_refine().unwrap();
            assert_eq!(m.n_triangles(), expect);
            m.check_conformity().unwrap();
            assert!((total_area(&m) - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn uniform_refine_children_quarter_area() {
        let m = unit_square(2);
        let parent_areas = m.geometry().unwrap().areas;
        let r = m.uniform_refine().unwrap();
        let child_areas = r.geometry().unwrap().areas;
        for (t, a) in parent_areas.iter().enumerate() {
            for k in 0..4 {
                assert!((child_areas[4 * t + k] - a / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn refine_marked_empty_is_identity() {
        let m = unit_square(2);
        let r = m.refine_marked(&MarkedSet::new(vec![])).unwrap();
        assert_eq!(r.n_triangles(), m.n_triangles());
        assert_eq!(r.triangles(), m.triangles());
    }

    #[test]
    fn refine_single_triangle_keeps_conformity() {
        let m = unit_square(1);
        let r = m.refine_marked(&MarkedSet::new(vec![0])).unwrap();
        r.check_conformity().unwrap();
        assert!((total_area(&r) - 1.0).abs() < 1e-14);
        // 4 red children + a green pair in the neighbor
        assert_eq!(r.n_triangles(), 6);
    }

    #[test]
    fn mark_all_matches_uniform_refine() {
        let m = unit_square(3);
        let all = MarkedSet::new((0..m.n_triangles()).collect());
        let a = m.refine_marked(&all).unwrap();
        let b = m.uniform_refine().unwrap();
        assert_eq!(a.n_triangles(), b.n_triangles());
        let key = |mesh: &Mesh| {
            let mut k: Vec<[usize; 3]> = mesh
                .triangles()
                .iter()
                .map(|t| {
                    let mut s = *t;
                    s.sort_unstable();
                    s
                })
                .collect();
            k.sort_unstable();
            k
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn repeated_marking_dissolves_greens() {
        let mut m = unit_square(2);
        for round in 0..6 {
            // always mark triangle 0 plus any green triangles
            let marks: Vec<usize> =
                (0..m.n_triangles()).filter(|&t| t == 0 || m.is_green(t)).collect();
            m = m.refine_marked(&MarkedSet::new(marks)).unwrap();
            m.check_conformity().unwrap();
            assert!((total_area(&m) - 1.0).abs() < 1e-13, "round {round}");
        }
    }

    #[test]
    fn random_marking_stays_conforming() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut m = unit_square(4);
        for _ in 0..5 {
            let marks: Vec<usize> =
                (0..m.n_triangles()).filter(|_| rng.gen_bool(0.25)).collect();
            if marks.is_empty() {
                continue;
            }
            m = m.refine_marked(&MarkedSet::new(marks)).unwrap();
            m.check_conformity().unwrap();
            assert!((total_area(&m) - 1.0).abs() < 1e-13);
        }
        // regions stay inherited: everything region 0 here
        assert!(m.regions().iter().all(|&r| r == 0));
    }

    #[test]
    fn mark_fixed_fraction_rules() {
        let all = mark_fixed_fraction(&[1.0, 1.0], 1.0).unwrap();
        assert_eq!(all.indices(), &[0, 1]);
        let half = mark_fixed_fraction(&[3.0, 1.0, 2.0, 5.0], 0.5).unwrap();
        assert_eq!(half.indices(), &[0, 3]);
        let ties = mark_fixed_fraction(&[7.0; 8], 0.25).unwrap();
        assert_eq!(ties.indices(), &[0, 1]);
        assert!(mark_fixed_fraction(&[1.0], 0.0).is_err());
        assert!(mark_fixed_fraction(&[-1.0], 0.5).is_err());
    }

    #[test]
    fn geometry_closed_forms() {
        let m = unit_square(1);
        let g = m.geometry().unwrap();
        for a in &g.areas {
            assert!((a - 0.5).abs() < 1e-15);
        }
        for grads in &g.bary_grads {
            let sx: f64 = grads.iter().map(|g| g[0]).sum();
            let sy: f64 = grads.iter().map(|g| g[1]).sum();
            assert!(sx.abs() < 1e-14 && sy.abs() < 1e-14);
        }
        // boundary normals point outward
        for e in m.boundary_edges() {
            let n = g.boundary_normals[e].unwrap();
            let [lo, hi] = m.edges()[e];
            let mid = [
                0.5 * (m.vertices()[lo][0] + m.vertices()[hi][0]),
                0.5 * (m.vertices()[lo][1] + m.vertices()[hi][1]),
            ];
            let owner = (0..m.n_triangles())
                .find(|&t| m.tri_edges()[t].iter().any(|&(ei, _)| ei == e))
                .unwrap();
            let c = centroid(m.vertices(), m.triangles()[owner]);
            assert!(n[0] * (c[0] - mid[0]) + n[1] * (c[1] - mid[1]) < 0.0);
        }
    }

    #[test]
    fn serialization_round_trip() {
        let m = Mesh::rect_structured(
            3,
            2,
            Diagonal::Anti,
            |c| if c[0] < 0.5 { 4 } else { 9 },
            |mid| if mid[1] < 1e-12 { BoundaryTag::neumann(2) } else { BoundaryTag::dirichlet(0) },
        )
        .unwrap();
        let text = m.to_text();
        let back = Mesh::from_text(&text).unwrap();
        assert_eq!(back.triangles(), m.triangles());
        assert_eq!(back.regions(), m.regions());
        assert_eq!(back.edges(), m.edges());
        for e in 0..m.n_edges() {
            assert_eq!(back.boundary_tag(e), m.boundary_tag(e));
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match Mesh::from_text("VERTICES x") {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        match Mesh::from_text("NOPE 3") {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        let good = unit_square(1).to_text();
        let bad = good.replace("TRIANGLES", "CELLS");
        assert!(matches!(Mesh::from_text(&bad), Err(MeshError::Parse { .. })));
    }

    #[test]
    fn boundary_tags_inherited_on_children() {
        let m = Mesh::rect_structured(
            2,
            2,
            Diagonal::Main,
            |_| 0,
            |mid| if mid[0] < 1e-12 { BoundaryTag::robin(7) } else { BoundaryTag::dirichlet(0) },
        )
        .unwrap();
        let r = m.uniform_refine().unwrap().uniform_refine().unwrap();
        for e in r.boundary_edges() {
            let tag = r.boundary_tag(e).unwrap();
            let [lo, hi] = r.edges()[e];
            let on_left =
                r.vertices()[lo][0].abs() < 1e-12 && r.vertices()[hi][0].abs() < 1e-12;
            if on_left {
                assert_eq!(tag, BoundaryTag::robin(7));
            } else {
                assert_eq!(tag, BoundaryTag::dirichlet(0));
            }
        }
    }
}
