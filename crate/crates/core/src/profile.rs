//! Profile record and the small categorical vocabularies it uses.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

macro_rules! vocabulary {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn label(self) -> &'static str {
                match self { $($name::$variant => $label),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($label => Ok($name::$variant),)+
                    _ => Err(format!("unknown {} `{}`", stringify!($name), s)),
                }
            }
        }
    };
}

vocabulary!(Region {
    Europe => "Europe",
    NorthAmerica => "NorthAmerica",
    SouthAmerica => "SouthAmerica",
    Asia => "Asia",
    Africa => "Africa",
    Oceania => "Oceania",
});

vocabulary!(
    /// Operating system reported for the victim machine.
    Os {
        Win10 => "Win10",
        Win8 => "Win8",
        Win7 => "Win7",
        Other => "Other",
    }
);

vocabulary!(Browser {
    Chrome => "Chrome",
    Firefox => "Firefox",
    Opera => "Opera",
    Edge => "Edge",
});

vocabulary!(
    /// Resource categories used to bin stolen credentials.
    Category {
        Services => "Services",
        Social => "Social",
        Commerce => "Commerce",
        MoneyTransfer => "MoneyTransfer",
        Crypto => "Crypto",
        Other => "Other",
    }
);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrowserData {
    pub present: bool,
    pub cookies: u32,
}

/// Credential counts indexed by [`Category`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts(pub [u32; 6]);

impl CategoryCounts {
    pub fn get(&self, c: Category) -> u32 {
        self.0[c.index()]
    }

    pub fn add(&mut self, c: Category, n: u32) {
        self.0[c.index()] += n;
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub id: String,
    pub price: f64,
    pub country: String,
    pub region: Region,
    /// Per-capita GDP (USD); `None` until enriched or when the country has no entry.
    pub wdi: Option<f64>,
    pub os: Os,
    /// Indexed by [`Browser`].
    pub browsers: [BrowserData; 4],
    /// Platform identifiers as listed by the market; aliases of the same
    /// platform may repeat until collapsed.
    pub platforms: Vec<Arc<str>>,
    pub credentials: CategoryCounts,
    pub date_infect: NaiveDate,
    pub date_update: NaiveDate,
    pub sold: Option<bool>,
}

impl Profile {
    pub fn browser(&self, b: Browser) -> BrowserData {
        self.browsers[b.index()]
    }
}

/// Column layout of profile CSV files.
pub const PROFILE_COLUMNS: [&str; 24] = [
    "id",
    "price",
    "country",
    "region",
    "wdi",
    "os",
    "chrome",
    "chrome_cookies",
    "firefox",
    "firefox_cookies",
    "opera",
    "opera_cookies",
    "edge",
    "edge_cookies",
    "platforms",
    "services",
    "social",
    "commerce",
    "moneytransfer",
    "crypto",
    "other",
    "date_infect",
    "date_update",
    "sold",
];

#[derive(Debug, thiserror::Error)]
pub enum ProfileCsvError {
    #[error("profile csv line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Write profiles with a header row. Platforms are joined with `;`.
pub fn write_profiles_csv<W: Write>(w: W, profiles: &[Profile]) -> Result<(), ProfileCsvError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(PROFILE_COLUMNS)?;
    for p in profiles {
        let mut rec: Vec<String> = vec![
            p.id.clone(),
            p.price.to_string(),
            p.country.clone(),
            p.region.to_string(),
            opt_f64(p.wdi),
            p.os.to_string(),
        ];
        for b in &p.browsers {
            rec.push(u8::from(b.present).to_string());
            rec.push(b.cookies.to_string());
        }
        let plats: Vec<&str> = p.platforms.iter().map(|s| s.as_ref()).collect();
        rec.push(plats.join(";"));
        rec.extend(p.credentials.0.iter().map(u32::to_string));
        rec.push(p.date_infect.to_string());
        rec.push(p.date_update.to_string());
        rec.push(p.sold.map_or(String::new(), |s| u8::from(s).to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_profiles_csv<R: Read>(r: R) -> Result<Vec<Profile>, ProfileCsvError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(PROFILE_COLUMNS.iter().copied()) {
        return Err(ProfileCsvError::Parse {
            line: 1,
            msg: format!("expected header `{}`", PROFILE_COLUMNS.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |msg: String| ProfileCsvError::Parse { line, msg };
        let num = |i: usize| -> Result<f64, ProfileCsvError> {
            rec[i].parse::<f64>().map_err(|e| err(format!("{}: {e}", PROFILE_COLUMNS[i])))
        };
        let count = |i: usize| -> Result<u32, ProfileCsvError> {
            rec[i].parse::<u32>().map_err(|e| err(format!("{}: {e}", PROFILE_COLUMNS[i])))
        };
        let flag = |i: usize| -> Result<bool, ProfileCsvError> {
            match &rec[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(err(format!("{}: expected 0 or 1, got `{other}`", PROFILE_COLUMNS[i]))),
            }
        };
        let date = |i: usize| -> Result<NaiveDate, ProfileCsvError> {
            rec[i].parse::<NaiveDate>().map_err(|e| err(format!("{}: {e}", PROFILE_COLUMNS[i])))
        };
        let mut browsers = [BrowserData::default(); 4];
        for (k, b) in browsers.iter_mut().enumerate() {
            *b = BrowserData {
                present: flag(6 + 2 * k)?,
                cookies: count(7 + 2 * k)?,
            };
            if !b.present && b.cookies != 0 {
                return Err(err("cookie count without browser".into()));
            }
        }
        let mut credentials = CategoryCounts::default();
        for k in 0..6 {
            credentials.0[k] = count(15 + k)?;
        }
        let price = num(1)?;
        if !(price >= 0.0) {
            return Err(err("price must be >= 0".into()));
        }
        out.push(Profile {
            id: rec[0].to_string(),
            price,
            country: rec[2].to_string(),
            region: rec[3].parse().map_err(err)?,
            wdi: if rec[4].is_empty() { None } else { Some(num(4)?) },
            os: rec[5].parse().map_err(err)?,
            browsers,
            platforms: if rec[14].is_empty() {
                Vec::new()
            } else {
                rec[14].split(';').map(Arc::from).collect()
            },
            credentials,
            date_infect: date(21)?,
            date_update: date(22)?,
            sold: if rec[23].is_empty() { None } else { Some(flag(23)?) },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_round_trips() {
        for r in Region::ALL {
            assert_eq!(r.label().parse::<Region>().unwrap(), *r);
        }
        for (i, c) in Category::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
        }
        assert!("Linux".parse::<Os>().is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let d = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        let mut p = Profile {
            id: "x1".into(),
            price: 12.5,
            country: "DE".into(),
            region: Region::Europe,
            wdi: Some(46208.0),
            os: Os::Win7,
            browsers: [BrowserData { present: true, cookies: 9 }, BrowserData::default(), BrowserData::default(), BrowserData { present: true, cookies: 1 }],
            platforms: vec![Arc::from("a.com"), Arc::from("b.com")],
            credentials: CategoryCounts([1, 1, 0, 0, 0, 0]),
            date_infect: d,
            date_update: d,
            sold: Some(true),
        };
        let mut q = p.clone();
        q.id = "x2".into();
        q.wdi = None;
        q.sold = None;
        q.platforms.clear();
        q.credentials = CategoryCounts::default();
        let mut buf = Vec::new();
        write_profiles_csv(&mut buf, &[p.clone(), q.clone()]).unwrap();
        assert_eq!(read_profiles_csv(buf.as_slice()).unwrap(), vec![p.clone(), q]);

        p.browsers[1].cookies = 3;
        let mut buf = Vec::new();
        write_profiles_csv(&mut buf, &[p]).unwrap();
        assert!(matches!(read_profiles_csv(buf.as_slice()), Err(ProfileCsvError::Parse { line: 2, .. })));
    }

    #[test]
    fn counts_total() {
        let mut c = CategoryCounts::default();
        c.add(Category::Crypto, 2);
        c.add(Category::Services, 3);
        assert_eq!(c.total(), 5);
        assert_eq!(c.get(Category::Crypto), 2);
    }
}
