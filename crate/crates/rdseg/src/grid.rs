//! Plain batched 2-D containers shared across modules: per-pixel scalar maps
//! (confidences, difficulty weights) and per-pixel class labels. Neither
//! participates in gradient computation.

/// A `[batch, height, width]` grid of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    batch: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl PixelGrid {
    pub fn new(batch: usize, height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), batch * height * width, "pixel grid size mismatch");
        Self { batch, height, width, values }
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        Self::new(batch, height, width, vec![0.0; batch * height * width])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, b: usize, h: usize, w: usize) -> f64 {
        self.values[(b * self.height + h) * self.width + w]
    }

    pub fn set(&mut self, b: usize, h: usize, w: usize, v: f64) {
        self.values[(b * self.height + h) * self.width + w] = v;
    }

    /// Slice holding one sample's `height * width` values.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[b * n..(b + 1) * n]
    }
}

/// A `[batch, height, width]` grid of integer class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    batch: usize,
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelGrid {
    pub fn new(batch: usize, height: usize, width: usize, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), batch * height * width, "label grid size mismatch");
        Self { batch, height, width, labels }
    }

    pub fn filled(batch: usize, height: usize, width: usize, class: u32) -> Self {
        Self::new(batch, height, width, vec![class; batch * height * width])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn get(&self, b: usize, h: usize, w: usize) -> u32 {
        self.labels[(b * self.height + h) * self.width + w]
    }

    pub fn set(&mut self, b: usize, h: usize, w: usize, v: u32) {
        self.labels[(b * self.height + h) * self.width + w] = v;
    }

    pub fn sample(&self, b: usize) -> &[u32] {
        let n = self.height * self.width;
        &self.labels[b * n..(b + 1) * n]
    }

    /// Stack single-sample grids into one batch.
    pub fn stack(items: &[&LabelGrid]) -> Self {
        assert!(!items.is_empty());
        let (h, w) = (items[0].height, items[0].width);
        let mut labels = Vec::with_capacity(items.len() * h * w);
        for item in items {
            assert_eq!(item.batch, 1, "stack expects single-sample grids");
            assert_eq!((item.height, item.width), (h, w));
            labels.extend_from_slice(&item.labels);
        }
        Self::new(items.len(), h, w, labels)
    }
}
