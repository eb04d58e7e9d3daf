use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Procedural glyph family. Classes that share a glyph render identically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Glyph {
    Button,
    Checkbox { ticked: bool },
    Icon,
    Dropdown,
    Input,
    Radio { dot: bool },
    Text,
    Image,
    HorizontalAxis,
    VerticalAxis,
    Menu,
    List,
    TabBar,
    Table,
    Tree,
    TextareaLabel,
    DescriptionList,
    Legend,
    Chart,
    Graph,
    DateArea,
}

impl Glyph {
    /// Inclusive `(min, max)` width and height ranges in pixels on a 256 canvas.
    pub fn size_range(self) -> ([u32; 2], [u32; 2]) {
        match self {
            Glyph::Button => ([36, 96], [16, 30]),
            Glyph::Checkbox { .. } | Glyph::Radio { .. } => ([12, 20], [12, 20]),
            Glyph::Icon => ([14, 28], [14, 28]),
            Glyph::Dropdown => ([56, 110], [16, 26]),
            Glyph::Input | Glyph::DateArea => ([64, 140], [16, 26]),
            Glyph::Text => ([36, 110], [8, 28]),
            Glyph::Image => ([36, 96], [30, 80]),
            Glyph::HorizontalAxis => ([80, 180], [6, 10]),
            Glyph::VerticalAxis => ([6, 10], [80, 180]),
            Glyph::Menu | Glyph::TabBar => ([90, 180], [14, 24]),
            Glyph::List | Glyph::Tree | Glyph::DescriptionList => ([50, 110], [40, 100]),
            Glyph::Table => ([70, 150], [40, 100]),
            Glyph::TextareaLabel => ([30, 80], [8, 14]),
            Glyph::Legend => ([40, 90], [20, 50]),
            Glyph::Chart | Glyph::Graph => ([60, 130], [50, 110]),
        }
    }

    /// Shape word used in descriptions; square-ish boxes are described by aspect.
    pub fn shape_phrase(self, w: u32, h: u32) -> &'static str {
        match self {
            Glyph::Radio { .. } => return "circle",
            Glyph::HorizontalAxis => return "thin horizontal line",
            Glyph::VerticalAxis => return "thin vertical line",
            _ => {}
        }
        let r = w as f64 / h as f64;
        if r >= 2.5 {
            "wide rectangle"
        } else if r <= 0.4 {
            "narrow rectangle"
        } else if (0.8..=1.25).contains(&r) {
            "square"
        } else {
            "rectangle"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub glyph: Glyph,
    /// Relative sampling weight.
    pub weight: f64,
}

/// Ordered class list; class ids are indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub name: String,
    pub classes: Vec<ClassInfo>,
    pub twin_pairs: Vec<(usize, usize)>,
}

/// Weight given to the thin axis classes so they stay rare.
pub const AXIS_WEIGHT: f64 = 0.3;

pub const CATALOG_NAMES: [&str; 2] = ["twin12", "full23"];

fn class(name: &str, glyph: Glyph, weight: f64) -> ClassInfo {
    ClassInfo {
        name: name.to_string(),
        glyph,
        weight,
    }
}

impl ClassCatalog {
    /// Default 12-class catalog with two twin pairs.
    pub fn twin12() -> Self {
        let tick = Glyph::Checkbox { ticked: true };
        Self {
            name: "twin12".into(),
            classes: vec![
                class("Button", Glyph::Button, 1.0),
                class("Decoy_Button", Glyph::Button, 1.0),
                class("Checkbox_Checked", tick, 1.0),
                class("Checkbox_Unchecked_Small", tick, 1.0),
                class("Icon", Glyph::Icon, 1.0),
                class("Dropdown", Glyph::Dropdown, 1.0),
                class("Input", Glyph::Input, 1.0),
                class("Radio_Selected", Glyph::Radio { dot: true }, 1.0),
                class("Text", Glyph::Text, 1.0),
                class("Image", Glyph::Image, 1.0),
                class("Horizontal_Axis", Glyph::HorizontalAxis, AXIS_WEIGHT),
                class("Vertical_Axis", Glyph::VerticalAxis, AXIS_WEIGHT),
            ],
            twin_pairs: vec![(0, 1), (2, 3)],
        }
    }

    /// The 23 classes of the real screenshot corpus, without twins.
    pub fn full23() -> Self {
        let c = |n, g| class(n, g, 1.0);
        Self {
            name: "full23".into(),
            classes: vec![
                c("Icon", Glyph::Icon),
                c("Dropdown", Glyph::Dropdown),
                c("Button", Glyph::Button),
                c("Menu", Glyph::Menu),
                c("Input", Glyph::Input),
                c("List", Glyph::List),
                c("TabBar", Glyph::TabBar),
                c("Table", Glyph::Table),
                c("Radio_Selected", Glyph::Radio { dot: true }),
                c("Radio_Unselected", Glyph::Radio { dot: false }),
                c("Checkbox_Unchecked", Glyph::Checkbox { ticked: false }),
                c("Checkbox_Checked", Glyph::Checkbox { ticked: true }),
                c("Tree", Glyph::Tree),
                c("Image", Glyph::Image),
                c("Text", Glyph::Text),
                c("Label_of_the_Textarea", Glyph::TextareaLabel),
                c("Description_List", Glyph::DescriptionList),
                c("Legend", Glyph::Legend),
                class("Horizontal_Axis", Glyph::HorizontalAxis, AXIS_WEIGHT),
                c("Chart", Glyph::Chart),
                c("Graph", Glyph::Graph),
                class("Vertical_Axis", Glyph::VerticalAxis, AXIS_WEIGHT),
                c("Date_area", Glyph::DateArea),
            ],
            twin_pairs: vec![],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "twin12" => Ok(Self::twin12()),
            "full23" => Ok(Self::full23()),
            other => Err(Error::Usage(format!(
                "unknown catalog `{other}` (valid: {})",
                CATALOG_NAMES.join(", ")
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name_of(&self, id: usize) -> &str {
        &self.classes[id].name
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.name.as_str())
    }

    /// Other member of `id`'s twin pair.
    pub fn twin_of(&self, id: usize) -> Option<usize> {
        self.twin_pairs.iter().find_map(|&(a, b)| match id {
            _ if id == a => Some(b),
            _ if id == b => Some(a),
            _ => None,
        })
    }

    /// Class ids that belong to a twin pair, in pair order.
    pub fn twin_classes(&self) -> Vec<usize> {
        self.twin_pairs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|d| d.name == c.name) {
                return Err(Error::Config(format!("duplicate class name `{}`", c.name)));
            }
            if !(c.weight > 0.0) {
                return Err(Error::Config(format!("class `{}` needs a positive weight", c.name)));
            }
        }
        for &(a, b) in &self.twin_pairs {
            let (ca, cb) = match (self.classes.get(a), self.classes.get(b)) {
                (Some(x), Some(y)) if a != b => (x, y),
                _ => return Err(Error::Config(format!("bad twin pair ({a}, {b})"))),
            };
            if ca.glyph != cb.glyph || ca.weight != cb.weight {
                return Err(Error::Config(format!(
                    "twins `{}` and `{}` must share glyph and weight",
                    ca.name, cb.name
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_catalogs_are_valid() {
        let t = ClassCatalog::twin12();
        t.validate().unwrap();
        assert_eq!(t.len(), 12);
        assert_eq!(t.twin_classes(), vec![0, 1, 2, 3]);
        assert_eq!(t.twin_of(1), Some(0));
        assert_eq!(t.twin_of(4), None);
        let f = ClassCatalog::full23();
        f.validate().unwrap();
        assert_eq!(f.len(), 23);
        assert!(f.twin_pairs.is_empty());
    }

    #[test]
    fn unknown_catalog_lists_valid_names() {
        let e = ClassCatalog::by_name("coco").unwrap_err().to_string();
        assert!(e.contains("twin12") && e.contains("full23"));
    }
}
