//! Node-function vocabulary and the feature-map shape algebra.
//!
//! Every grid node of a genotype names one [`FunctionSpec`] from a catalog.
//! A catalog is built from a [`FunctionSetId`] plus the list of output-channel
//! variants; the default variants are `{32, 64, 128}` and the kernel sizes are
//! always `{3, 5}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default output-channel variants for convolutional blocks.
pub const DEFAULT_CHANNELS: [usize; 3] = [32, 64, 128];
/// Kernel sizes available to convolutional blocks.
pub const KERNELS: [usize; 2] = [3, 5];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CatalogError {
    #[error("unknown function set `{0}`")]
    UnknownFunctionSet(String),
    #[error("{kind} expects {expected} input(s), got {got}")]
    ArityMismatch {
        kind: FunctionKind,
        expected: usize,
        got: usize,
    },
    #[error("channel variant list must be non-empty and positive")]
    BadChannels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FunctionSetId {
    ConvSet,
    ResSet,
}

impl fmt::Display for FunctionSetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FunctionSetId::ConvSet => "ConvSet",
            FunctionSetId::ResSet => "ResSet",
        })
    }
}

impl FromStr for FunctionSetId {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "convset" | "conv" => Ok(FunctionSetId::ConvSet),
            "resset" | "res" => Ok(FunctionSetId::ResSet),
            _ => Err(CatalogError::UnknownFunctionSet(s.to_string())),
        }
    }
}

/// Rows, columns and channels of a stack of feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl TensorShape {
    pub const fn new(rows: usize, cols: usize, channels: usize) -> Self {
        TensorShape {
            rows,
            cols,
            channels,
        }
    }

    /// Returns `None` when any dimension is zero.
    pub fn checked(rows: usize, cols: usize, channels: usize) -> Option<Self> {
        (rows > 0 && cols > 0 && channels > 0).then_some(TensorShape::new(rows, cols, channels))
    }

    pub fn elements(&self) -> usize {
        self.rows * self.cols * self.channels
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.rows, self.cols, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FunctionKind {
    ConvBlock,
    ResBlock,
    MaxPool,
    AvgPool,
    Sum,
    Concat,
}

impl fmt::Display for FunctionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One catalog entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub kind: FunctionKind,
    /// Output channels `C'` (convolutional blocks only, 0 otherwise).
    pub out_channels: usize,
    /// Square kernel side (convolutional blocks only, 0 otherwise).
    pub kernel: usize,
}

impl FunctionSpec {
    pub const fn conv_block(out_channels: usize, kernel: usize) -> Self {
        FunctionSpec {
            kind: FunctionKind::ConvBlock,
            out_channels,
            kernel,
        }
    }

    pub const fn res_block(out_channels: usize, kernel: usize) -> Self {
        FunctionSpec {
            kind: FunctionKind::ResBlock,
            out_channels,
            kernel,
        }
    }

    pub const fn simple(kind: FunctionKind) -> Self {
        FunctionSpec {
            kind,
            out_channels: 0,
            kernel: 0,
        }
    }

    pub fn arity(&self) -> usize {
        match self.kind {
            FunctionKind::Sum | FunctionKind::Concat => 2,
            _ => 1,
        }
    }

    pub fn is_convolutional(&self) -> bool {
        matches!(self.kind, FunctionKind::ConvBlock | FunctionKind::ResBlock)
    }

    /// Short symbol used in DOT labels and CSV output, e.g. `CB(32,3x3)`.
    pub fn symbol(&self) -> String {
        match self.kind {
            FunctionKind::ConvBlock => format!("CB({},{k}x{k})", self.out_channels, k = self.kernel),
            FunctionKind::ResBlock => format!("RB({},{k}x{k})", self.out_channels, k = self.kernel),
            FunctionKind::MaxPool => "MP".into(),
            FunctionKind::AvgPool => "AP".into(),
            FunctionKind::Sum => "Sum".into(),
            FunctionKind::Concat => "Concat".into(),
        }
    }

    /// Output shape for the given inputs, or `Ok(None)` when the result would
    /// have a zero-sized dimension.
    pub fn output_shape(
        &self,
        first: TensorShape,
        second: Option<TensorShape>,
    ) -> Result<Option<TensorShape>, CatalogError> {
        let got = 1 + usize::from(second.is_some());
        if got != self.arity() {
            return Err(CatalogError::ArityMismatch {
                kind: self.kind,
                expected: self.arity(),
                got,
            });
        }
        let a = first;
        Ok(match (self.kind, second) {
            (FunctionKind::ConvBlock | FunctionKind::ResBlock, _) => {
                TensorShape::checked(a.rows, a.cols, self.out_channels)
            }
            (FunctionKind::MaxPool | FunctionKind::AvgPool, _) => {
                TensorShape::checked(a.rows / 2, a.cols / 2, a.channels)
            }
            (FunctionKind::Concat, Some(b)) => TensorShape::checked(
                a.rows.min(b.rows),
                a.cols.min(b.cols),
                a.channels + b.channels,
            ),
            (FunctionKind::Sum, Some(b)) => TensorShape::checked(
                a.rows.min(b.rows),
                a.cols.min(b.cols),
                a.channels.max(b.channels),
            ),
            (FunctionKind::Sum | FunctionKind::Concat, None) => unreachable!("arity checked"),
        })
    }

    /// Learnable parameters: `k*k*C*C' + C'` for the convolution and `2*C'`
    /// for batch-norm scale and shift. The residual shortcut is parameter-free.
    pub fn param_count(&self, input: TensorShape) -> usize {
        if self.is_convolutional() {
            let k = self.kernel;
            let cout = self.out_channels;
            k * k * input.channels * cout + cout + 2 * cout
        } else {
            0
        }
    }
}

impl fmt::Display for FunctionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.symbol())
    }
}

/// An ordered list of function specs; genes store indices into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    set: FunctionSetId,
    entries: Vec<FunctionSpec>,
}

impl Catalog {
    /// Builds the catalog with the default channel variants.
    pub fn new(set: FunctionSetId) -> Self {
        Self::with_channels(set, &DEFAULT_CHANNELS).expect("default channels are valid")
    }

    /// Builds a catalog whose convolutional blocks use `channels` as the
    /// output-channel variants. Blocks are ordered by `(C', k)` ascending,
    /// followed by MP, AP, Sum, Concat.
    pub fn with_channels(set: FunctionSetId, channels: &[usize]) -> Result<Self, CatalogError> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(CatalogError::BadChannels);
        }
        let mut sorted = channels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut entries = Vec::with_capacity(sorted.len() * KERNELS.len() + 4);
        for &c in &sorted {
            for &k in &KERNELS {
                entries.push(match set {
                    FunctionSetId::ConvSet => FunctionSpec::conv_block(c, k),
                    FunctionSetId::ResSet => FunctionSpec::res_block(c, k),
                });
            }
        }
        entries.extend(
            [
                FunctionKind::MaxPool,
                FunctionKind::AvgPool,
                FunctionKind::Sum,
                FunctionKind::Concat,
            ]
            .map(FunctionSpec::simple),
        );
        Ok(Catalog { set, entries })
    }

    pub fn set(&self) -> FunctionSetId {
        self.set
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, function_id: usize) -> Option<&FunctionSpec> {
        self.entries.get(function_id)
    }

    pub fn entries(&self) -> &[FunctionSpec] {
        &self.entries
    }
}

/// Parses a function-set name and returns its default catalog.
pub fn catalog(function_set: &str) -> Result<Catalog, CatalogError> {
    Ok(Catalog::new(function_set.parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_set_has_table_entries() {
        let cat = Catalog::new(FunctionSetId::ConvSet);
        assert_eq!(cat.len(), 10);
        assert!(cat.entries().contains(&FunctionSpec::conv_block(32, 3)));
        assert!(cat.entries().contains(&FunctionSpec::conv_block(128, 5)));
        assert_eq!(cat.get(0), Some(&FunctionSpec::conv_block(32, 3)));
        assert_eq!(cat.get(1), Some(&FunctionSpec::conv_block(32, 5)));
        assert_eq!(cat.get(6).unwrap().kind, FunctionKind::MaxPool);
        assert_eq!(cat.get(9).unwrap().kind, FunctionKind::Concat);
    }

    #[test]
    fn res_set_has_no_conv_blocks() {
        let cat = Catalog::new(FunctionSetId::ResSet);
        assert_eq!(cat.len(), 10);
        assert!(cat.entries().iter().all(|f| f.kind != FunctionKind::ConvBlock));
        assert_eq!(
            cat.entries().iter().filter(|f| f.kind == FunctionKind::ResBlock).count(),
            6
        );
    }

    #[test]
    fn unknown_set_is_rejected() {
        assert!(matches!(catalog("DenseSet"), Err(CatalogError::UnknownFunctionSet(_))));
        assert_eq!(catalog("resset").unwrap().set(), FunctionSetId::ResSet);
    }

    #[test]
    fn reduced_channels() {
        let cat = Catalog::with_channels(FunctionSetId::ConvSet, &[16, 8]).unwrap();
        assert_eq!(cat.len(), 8);
        assert_eq!(cat.get(0), Some(&FunctionSpec::conv_block(8, 3)));
        assert!(Catalog::with_channels(FunctionSetId::ConvSet, &[]).is_err());
    }

    #[test]
    fn shape_rules() {
        let s = TensorShape::new;
        let cb = FunctionSpec::conv_block(64, 3);
        assert_eq!(cb.output_shape(s(32, 32, 3), None).unwrap(), Some(s(32, 32, 64)));
        let mp = FunctionSpec::simple(FunctionKind::MaxPool);
        assert_eq!(mp.output_shape(s(5, 5, 8), None).unwrap(), Some(s(2, 2, 8)));
        assert_eq!(mp.output_shape(s(1, 1, 8), None).unwrap(), None);
        let cat = FunctionSpec::simple(FunctionKind::Concat);
        assert_eq!(
            cat.output_shape(s(32, 32, 32), Some(s(16, 16, 64))).unwrap(),
            Some(s(16, 16, 96))
        );
        let sum = FunctionSpec::simple(FunctionKind::Sum);
        assert_eq!(
            sum.output_shape(s(32, 32, 32), Some(s(16, 16, 64))).unwrap(),
            Some(s(16, 16, 64))
        );
    }

    #[test]
    fn arity_mismatch() {
        let s = TensorShape::new(4, 4, 4);
        let sum = FunctionSpec::simple(FunctionKind::Sum);
        assert!(matches!(
            sum.output_shape(s, None),
            Err(CatalogError::ArityMismatch { expected: 2, got: 1, .. })
        ));
        let ap = FunctionSpec::simple(FunctionKind::AvgPool);
        assert!(ap.output_shape(s, Some(s)).is_err());
    }

    #[test]
    fn param_counts() {
        let s = TensorShape::new(32, 32, 3);
        assert_eq!(FunctionSpec::conv_block(32, 3).param_count(s), 960);
        assert_eq!(FunctionSpec::res_block(32, 3).param_count(s), 960);
        assert_eq!(FunctionSpec::simple(FunctionKind::MaxPool).param_count(s), 0);
        assert_eq!(FunctionSpec::simple(FunctionKind::Sum).param_count(s), 0);
    }

    #[test]
    fn symbols() {
        assert_eq!(FunctionSpec::conv_block(32, 3).symbol(), "CB(32,3x3)");
        assert_eq!(FunctionSpec::res_block(128, 5).symbol(), "RB(128,5x5)");
        assert_eq!(FunctionSpec::simple(FunctionKind::AvgPool).symbol(), "AP");
        assert_eq!(FunctionSpec::simple(FunctionKind::Concat).symbol(), "Concat");
    }
}
