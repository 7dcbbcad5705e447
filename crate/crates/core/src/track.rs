use nalgebra::Vector2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: usize,
    pub pixel: Vector2<f64>,
}

/// Pixel observations of one landmark, ordered by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub id: usize,
    pub observations: Vec<Observation>,
}

impl FeatureTrack {
    pub fn first_frame(&self) -> usize {
        self.observations.first().map_or(0, |o| o.frame)
    }

    pub fn last_frame(&self) -> usize {
        self.observations.last().map_or(0, |o| o.frame)
    }

    pub fn at_frame(&self, frame: usize) -> Option<&Observation> {
        self.observations
            .binary_search_by_key(&frame, |o| o.frame)
            .ok()
            .map(|i| &self.observations[i])
    }

    /// Observations inside the inclusive frame range.
    pub fn within(&self, first: usize, last: usize) -> &[Observation] {
        let lo = self.observations.partition_point(|o| o.frame < first);
        let hi = self.observations.partition_point(|o| o.frame <= last);
        &self.observations[lo..hi]
    }
}
