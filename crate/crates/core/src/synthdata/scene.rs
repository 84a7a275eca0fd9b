use rand::Rng;
use serde::{Deserialize, Serialize};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn parse(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s)
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(ShapeKind {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
});

named_enum!(
    /// Foreground palette. Disjoint from [`BgColor`] by construction.
    FgColor {
        Red => "red",
        Green => "green",
        Blue => "blue",
        Yellow => "yellow",
        Magenta => "magenta",
        Cyan => "cyan",
    }
);

named_enum!(Size {
    Small => "small",
    Medium => "medium",
    Large => "large",
});

named_enum!(Position {
    Center => "center",
    TopLeft => "top-left",
    TopRight => "top-right",
    BottomLeft => "bottom-left",
    BottomRight => "bottom-right",
});

named_enum!(BgColor {
    White => "white",
    Gray => "gray",
    Black => "black",
    Orange => "orange",
    Navy => "navy",
    Olive => "olive",
});

named_enum!(Brightness {
    Dim => "dim",
    Normal => "normal",
    Bright => "bright",
});

named_enum!(
    /// The six attribute families of a scene.
    AttrId {
        ObjectShape => "object shape",
        ObjectColor => "object color",
        ObjectSize => "object size",
        ObjectPosition => "object position",
        BackgroundColor => "background color",
        ImageBrightness => "image brightness",
    }
);

impl FgColor {
    /// Linear RGB in [0, 1] before brightness.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            FgColor::Red => [0.70, 0.10, 0.10],
            FgColor::Green => [0.10, 0.60, 0.10],
            FgColor::Blue => [0.10, 0.15, 0.70],
            FgColor::Yellow => [0.70, 0.65, 0.05],
            FgColor::Magenta => [0.65, 0.10, 0.65],
            FgColor::Cyan => [0.05, 0.60, 0.65],
        }
    }
}

impl BgColor {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            BgColor::White => [0.68, 0.68, 0.68],
            BgColor::Gray => [0.25, 0.25, 0.25],
            BgColor::Black => [0.04, 0.04, 0.04],
            BgColor::Orange => [0.70, 0.40, 0.05],
            BgColor::Navy => [0.08, 0.10, 0.38],
            BgColor::Olive => [0.36, 0.40, 0.08],
        }
    }
}

impl Size {
    /// Shape radius as a fraction of the image side.
    pub fn radius(self) -> f32 {
        match self {
            Size::Small => 0.11,
            Size::Medium => 0.18,
            Size::Large => 0.26,
        }
    }
}

impl Position {
    /// Shape center as fractions of (width, height).
    pub fn center(self) -> (f32, f32) {
        match self {
            Position::Center => (0.5, 0.5),
            Position::TopLeft => (0.28, 0.28),
            Position::TopRight => (0.72, 0.28),
            Position::BottomLeft => (0.28, 0.72),
            Position::BottomRight => (0.72, 0.72),
        }
    }
}

impl Brightness {
    pub fn factor(self) -> f32 {
        match self {
            Brightness::Dim => 0.6,
            Brightness::Normal => 1.0,
            Brightness::Bright => 1.4,
        }
    }
}

impl AttrId {
    pub fn cardinality(self) -> usize {
        match self {
            AttrId::ObjectShape => ShapeKind::ALL.len(),
            AttrId::ObjectColor => FgColor::ALL.len(),
            AttrId::ObjectSize => Size::ALL.len(),
            AttrId::ObjectPosition => Position::ALL.len(),
            AttrId::BackgroundColor => BgColor::ALL.len(),
            AttrId::ImageBrightness => Brightness::ALL.len(),
        }
    }

    /// Display name of value `index` of this attribute.
    pub fn value_name(self, index: usize) -> &'static str {
        let name = match self {
            AttrId::ObjectShape => ShapeKind::from_index(index).map(ShapeKind::name),
            AttrId::ObjectColor => FgColor::from_index(index).map(FgColor::name),
            AttrId::ObjectSize => Size::from_index(index).map(Size::name),
            AttrId::ObjectPosition => Position::from_index(index).map(Position::name),
            AttrId::BackgroundColor => BgColor::from_index(index).map(BgColor::name),
            AttrId::ImageBrightness => Brightness::from_index(index).map(Brightness::name),
        };
        name.unwrap_or_else(|| panic!("{self} has no value {index}"))
    }

    pub fn parse_value(self, s: &str) -> Option<usize> {
        (0..self.cardinality()).find(|&i| self.value_name(i) == s)
    }
}

/// Symbolic ground truth of one synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttrScene {
    pub shape: ShapeKind,
    pub fg_color: FgColor,
    pub size: Size,
    pub position: Position,
    pub bg_color: BgColor,
    pub brightness: Brightness,
}

impl AttrScene {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut pick = |n: usize| rng.random_range(0..n);
        let idx = [
            pick(ShapeKind::ALL.len()),
            pick(FgColor::ALL.len()),
            pick(Size::ALL.len()),
            pick(Position::ALL.len()),
            pick(BgColor::ALL.len()),
            pick(Brightness::ALL.len()),
        ];
        Self::from_values(idx)
    }

    /// Value indices in [`AttrId::ALL`] order.
    pub fn values(&self) -> [usize; 6] {
        [
            self.shape.index(),
            self.fg_color.index(),
            self.size.index(),
            self.position.index(),
            self.bg_color.index(),
            self.brightness.index(),
        ]
    }

    pub fn from_values(v: [usize; 6]) -> Self {
        AttrScene {
            shape: ShapeKind::ALL[v[0]],
            fg_color: FgColor::ALL[v[1]],
            size: Size::ALL[v[2]],
            position: Position::ALL[v[3]],
            bg_color: BgColor::ALL[v[4]],
            brightness: Brightness::ALL[v[5]],
        }
    }

    pub fn value(&self, attr: AttrId) -> usize {
        self.values()[attr.index()]
    }

    pub fn with_value(&self, attr: AttrId, value: usize) -> Self {
        let mut v = self.values();
        v[attr.index()] = value;
        Self::from_values(v)
    }

    /// Every scene, in lexicographic value order.
    pub fn enumerate() -> Vec<AttrScene> {
        let cards: Vec<usize> = AttrId::ALL.iter().map(|a| a.cardinality()).collect();
        let total: usize = cards.iter().product();
        (0..total)
            .map(|mut k| {
                let mut v = [0usize; 6];
                for i in (0..6).rev() {
                    v[i] = k % cards[i];
                    k /= cards[i];
                }
                Self::from_values(v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palettes_are_disjoint_and_unclipped() {
        for f in FgColor::ALL {
            for b in BgColor::ALL {
                assert_ne!(f.rgb(), b.rgb());
                assert_ne!(f.name(), b.name());
            }
        }
        let max = FgColor::ALL
            .iter()
            .map(|c| c.rgb())
            .chain(BgColor::ALL.iter().map(|c| c.rgb()))
            .flatten()
            .fold(0.0f32, f32::max);
        assert!(max * Brightness::Bright.factor() <= 1.0);
    }

    #[test]
    fn enumeration_covers_every_scene_once() {
        let all = AttrScene::enumerate();
        assert_eq!(all.len(), 3 * 6 * 3 * 5 * 6 * 3);
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn value_names_round_trip() {
        for a in AttrId::ALL {
            for i in 0..a.cardinality() {
                assert_eq!(a.parse_value(a.value_name(i)), Some(i));
            }
        }
    }
}
