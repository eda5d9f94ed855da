//! Built-in country table used by the market generator. GDP figures are
//! rounded 2020 per-capita values in USD; territories without an entry of
//! their own carry `None`.

use crate::profile::Region;

#[derive(Debug, Clone, Copy)]
pub struct Country {
    pub code: &'static str,
    pub region: Region,
    pub gdp_per_capita: Option<f64>,
    /// Relative weight within the region.
    pub weight: f64,
}

const fn c(code: &'static str, region: Region, gdp: f64, weight: f64) -> Country {
    Country {
        code,
        region,
        gdp_per_capita: Some(gdp),
        weight,
    }
}

const fn t(code: &'static str, region: Region, weight: f64) -> Country {
    Country {
        code,
        region,
        gdp_per_capita: None,
        weight,
    }
}

use Region::*;

pub const COUNTRIES: &[Country] = &[
    c("DE", Europe, 46_208.0, 14.0),
    c("FR", Europe, 39_030.0, 12.0),
    c("IT", Europe, 31_714.0, 14.0),
    c("ES", Europe, 27_057.0, 12.0),
    c("GB", Europe, 40_285.0, 9.0),
    c("NL", Europe, 52_397.0, 4.0),
    c("PL", Europe, 15_742.0, 6.0),
    c("PT", Europe, 22_176.0, 5.0),
    c("RO", Europe, 12_896.0, 5.0),
    c("GR", Europe, 17_676.0, 4.0),
    c("BE", Europe, 45_159.0, 3.0),
    c("CH", Europe, 86_602.0, 1.5),
    c("SE", Europe, 52_274.0, 2.0),
    c("UA", Europe, 3_752.0, 4.0),
    c("RS", Europe, 7_720.0, 2.5),
    c("HU", Europe, 15_899.0, 2.0),
    c("US", NorthAmerica, 63_528.0, 62.0),
    c("CA", NorthAmerica, 43_242.0, 14.0),
    c("MX", NorthAmerica, 8_329.0, 20.0),
    c("DO", NorthAmerica, 7_268.0, 3.6),
    t("GP", NorthAmerica, 0.4),
    c("BR", SouthAmerica, 6_797.0, 45.0),
    c("AR", SouthAmerica, 8_496.0, 16.0),
    c("CO", SouthAmerica, 5_334.0, 14.0),
    c("CL", SouthAmerica, 13_094.0, 8.0),
    c("PE", SouthAmerica, 6_127.0, 9.0),
    c("EC", SouthAmerica, 5_600.0, 7.6),
    t("GF", SouthAmerica, 0.4),
    c("IN", Asia, 1_928.0, 28.0),
    c("ID", Asia, 3_870.0, 14.0),
    c("PH", Asia, 3_299.0, 14.0),
    c("VN", Asia, 2_786.0, 12.0),
    c("TH", Asia, 7_187.0, 10.0),
    c("MY", Asia, 10_412.0, 8.0),
    c("KG", Asia, 1_174.0, 3.0),
    c("UZ", Asia, 1_751.0, 4.0),
    c("JP", Asia, 40_040.0, 6.0),
    t("TW", Asia, 1.0),
    c("ZA", Africa, 5_656.0, 30.0),
    c("EG", Africa, 3_548.0, 20.0),
    c("NG", Africa, 2_097.0, 15.0),
    c("MA", Africa, 3_058.0, 15.0),
    c("DZ", Africa, 3_307.0, 12.0),
    c("BI", Africa, 238.0, 5.0),
    t("RE", Africa, 1.6),
    t("YT", Africa, 1.4),
    c("AU", Oceania, 51_693.0, 80.0),
    c("NZ", Oceania, 41_597.0, 20.0),
];

pub fn countries_in(region: Region) -> impl Iterator<Item = &'static Country> {
    COUNTRIES.iter().filter(move |c| c.region == region)
}

pub fn lookup(code: &str) -> Option<&'static Country> {
    COUNTRIES.iter().find(|c| c.code == code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_region_has_countries() {
        for r in Region::ALL {
            assert!(countries_in(*r).count() >= 2, "{r}");
        }
        assert!(lookup("TW").unwrap().gdp_per_capita.is_none());
    }
}
