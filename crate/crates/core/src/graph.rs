//! Skeleton topology, degree-normalized adjacency and the three-way spatial
//! partition (self, toward root, away from root).

use std::collections::VecDeque;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("adjacency must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("adjacency entry ({0}, {1}) is not 0 or 1")]
    NonBinary(usize, usize),
    #[error("adjacency has a self-loop at joint {0}")]
    SelfLoop(usize),
    #[error("topology is disconnected: joint `{0}` is unreachable from the root")]
    Disconnected(String),
    #[error("topology needs exactly {expected} edges for {joints} joints, got {got}")]
    NotATree { joints: usize, expected: usize, got: usize },
    #[error("root index {root} out of range for {joints} joints")]
    BadRoot { root: usize, joints: usize },
    #[error("unknown joint `{0}`")]
    UnknownJoint(String),
    #[error("duplicate joint `{0}`")]
    DuplicateJoint(String),
    #[error("topology line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Joint names of the default 15-joint skeleton, in storage order.
pub const CANONICAL_JOINTS: [&str; 15] = [
    "pelvis",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

const CANONICAL_EDGES: [(&str, &str); 14] = [
    ("pelvis", "neck"),
    ("neck", "head"),
    ("neck", "l_shoulder"),
    ("l_shoulder", "l_elbow"),
    ("l_elbow", "l_wrist"),
    ("neck", "r_shoulder"),
    ("r_shoulder", "r_elbow"),
    ("r_elbow", "r_wrist"),
    ("pelvis", "l_hip"),
    ("l_hip", "l_knee"),
    ("l_knee", "l_ankle"),
    ("pelvis", "r_hip"),
    ("r_hip", "r_knee"),
    ("r_knee", "r_ankle"),
];

/// Named joints joined by undirected bones forming a tree, plus a root.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTopology {
    joints: Vec<String>,
    edges: Vec<(usize, usize)>,
    root: usize,
    hops: Vec<usize>,
}

impl SkeletonTopology {
    pub fn new(joints: Vec<String>, edges: Vec<(usize, usize)>, root: usize) -> Result<Self, GraphError> {
        let n = joints.len();
        if root >= n {
            return Err(GraphError::BadRoot { root, joints: n });
        }
        for (i, name) in joints.iter().enumerate() {
            if joints[..i].contains(name) {
                return Err(GraphError::DuplicateJoint(name.clone()));
            }
        }
        if edges.len() + 1 != n {
            return Err(GraphError::NotATree {
                joints: n,
                expected: n - 1,
                got: edges.len(),
            });
        }
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(GraphError::UnknownJoint(format!("#{}", a.max(b))));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
        }
        let hops = hop_distances(n, &edges, root);
        if let Some(i) = hops.iter().position(|&h| h == usize::MAX) {
            return Err(GraphError::Disconnected(joints[i].clone()));
        }
        Ok(Self {
            joints,
            edges,
            root,
            hops,
        })
    }

    /// The default 15-joint skeleton rooted at the pelvis.
    pub fn canonical() -> Self {
        let joints: Vec<String> = CANONICAL_JOINTS.iter().map(|s| s.to_string()).collect();
        let idx = |name: &str| CANONICAL_JOINTS.iter().position(|j| *j == name).unwrap();
        let edges = CANONICAL_EDGES.iter().map(|(a, b)| (idx(a), idx(b))).collect();
        Self::new(joints, edges, 0).expect("canonical topology is a valid tree")
    }

    /// Parses the plain-text topology format:
    ///
    /// ```text
    /// # comment
    /// joint pelvis root
    /// joint neck
    /// edge pelvis neck
    /// ```
    ///
    /// Joints are stored in declaration order; exactly one joint carries the
    /// `root` marker.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut joints: Vec<String> = Vec::new();
        let mut root = None;
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| GraphError::Parse {
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["joint", name] => joints.push(name.to_string()),
                ["joint", name, "root"] => {
                    if root.is_some() {
                        return Err(err("second root marker"));
                    }
                    root = Some(joints.len());
                    joints.push(name.to_string());
                }
                ["edge", a, b] => {
                    let find = |n: &str| {
                        joints
                            .iter()
                            .position(|j| j == n)
                            .ok_or_else(|| GraphError::UnknownJoint(n.to_string()))
                    };
                    edges.push((find(a)?, find(b)?));
                }
                _ => return Err(err("expected `joint <name> [root]` or `edge <a> <b>`")),
            }
        }
        let root = root.ok_or(GraphError::Parse {
            line: 0,
            msg: "no joint marked root".into(),
        })?;
        Self::new(joints, edges, root)
    }

    /// Serializes to the format accepted by [`SkeletonTopology::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, j) in self.joints.iter().enumerate() {
            let _ = writeln!(s, "joint {j}{}", if i == self.root { " root" } else { "" });
        }
        for &(a, b) in &self.edges {
            let _ = writeln!(s, "edge {} {}", self.joints[a], self.joints[b]);
        }
        s
    }

    /// Short content hash used to tie datasets and checkpoints to a skeleton.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[String] {
        &self.joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j == name)
    }

    /// Breadth-first hop distance of every joint from the root.
    pub fn hops(&self) -> &[usize] {
        &self.hops
    }

    /// Binary adjacency without self-loops.
    pub fn adjacency(&self) -> Tensor {
        let n = self.joint_count();
        let mut a = Tensor::zeros(&[n, n]);
        for &(i, j) in &self.edges {
            a.data_mut()[i * n + j] = 1.0;
            a.data_mut()[j * n + i] = 1.0;
        }
        a
    }
}

fn hop_distances(n: usize, edges: &[(usize, usize)], root: usize) -> Vec<usize> {
    let mut nbrs = vec![Vec::new(); n];
    for &(a, b) in edges {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let mut hops = vec![usize::MAX; n];
    hops[root] = 0;
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for &v in &nbrs[u] {
            if hops[v] == usize::MAX {
                hops[v] = hops[u] + 1;
                queue.push_back(v);
            }
        }
    }
    hops
}

fn check_binary_symmetric(a: &Tensor) -> Result<usize, GraphError> {
    let (r, c) = (a.shape()[0], a.shape().get(1).copied().unwrap_or(1));
    if a.shape().len() != 2 || r != c {
        return Err(GraphError::NotSquare { rows: r, cols: c });
    }
    for i in 0..r {
        for j in 0..r {
            let v = a.at2(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(GraphError::NonBinary(i, j));
            }
            if v != a.at2(j, i) {
                return Err(GraphError::Asymmetric(i, j));
            }
        }
        if a.at2(i, i) != 0.0 {
            return Err(GraphError::SelfLoop(i));
        }
    }
    Ok(r)
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor, GraphError> {
    let n = check_binary_symmetric(a)?;
    let mut hat = a.clone();
    for i in 0..n {
        hat.data_mut()[i * n + i] = 1.0;
    }
    Ok(normalize_partition(&hat))
}

/// `D_out^{-1/2} M D_in^{-1/2}` with row-sum and column-sum degrees. For a
/// symmetric `M` both degrees coincide; joints with zero degree contribute
/// zero entries.
pub fn normalize_partition(m: &Tensor) -> Tensor {
    let n = m.rows();
    let inv_sqrt = |d: f64| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
    let row: Vec<f64> = (0..n).map(|i| inv_sqrt(m.row(i).iter().sum())).collect();
    let col: Vec<f64> = (0..n).map(|j| inv_sqrt((0..n).map(|i| m.at2(i, j)).sum())).collect();
    Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        m.at2(i, j) * row[i] * col[j]
    })
}

/// Splits `A + I` into self-connections, edges toward the root and edges
/// away from the root. Entry `(i, j)` of the second matrix is set when `j`
/// is a neighbour of `i` closer to the root.
pub fn partition_adjacency(topology: &SkeletonTopology) -> [Tensor; 3] {
    let n = topology.joint_count();
    let hops = topology.hops();
    let mut parts = [Tensor::zeros(&[n, n]), Tensor::zeros(&[n, n]), Tensor::zeros(&[n, n])];
    for i in 0..n {
        parts[0].data_mut()[i * n + i] = 1.0;
    }
    for &(a, b) in topology.edges() {
        for (i, j) in [(a, b), (b, a)] {
            let which = if hops[j] < hops[i] { 1 } else { 2 };
            parts[which].data_mut()[i * n + j] = 1.0;
        }
    }
    parts
}

/// Precomputed adjacency matrices for one topology.
#[derive(Clone, Debug)]
pub struct AdjacencySet {
    pub adjacency: Tensor,
    pub adjacency_hat: Tensor,
    pub degree_hat: Vec<f64>,
    /// Eq.-1 style normalized `A + I`.
    pub normalized: Tensor,
    pub partitions: [Tensor; 3],
    pub normalized_partitions: [Tensor; 3],
}

impl AdjacencySet {
    pub fn new(topology: &SkeletonTopology) -> Self {
        let adjacency = topology.adjacency();
        let n = topology.joint_count();
        let mut adjacency_hat = adjacency.clone();
        for i in 0..n {
            adjacency_hat.data_mut()[i * n + i] = 1.0;
        }
        let degree_hat = (0..n).map(|i| adjacency_hat.row(i).iter().sum()).collect();
        let normalized = normalize_adjacency(&adjacency).expect("topology adjacency is valid");
        let partitions = partition_adjacency(topology);
        let normalized_partitions = [
            normalize_partition(&partitions[0]),
            normalize_partition(&partitions[1]),
            normalize_partition(&partitions[2]),
        ];
        Self {
            adjacency,
            adjacency_hat,
            degree_hat,
            normalized,
            partitions,
            normalized_partitions,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.adjacency.rows()
    }
}
