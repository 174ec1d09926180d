//! Canonical text emission. Every line ends with a newline; floats carry
//! exactly three decimals; slot-valued fields print their literal markers.

use super::{EmbeddingSlot, SceneProgram, SETTER_NAMES};

/// Formats a float with exactly three decimals.
///
/// Ties round half-to-even on the exact binary value, which is what Rust's
/// fixed-precision formatting does.
pub fn format_float3(x: f64) -> String {
    format!("{x:.3}")
}

fn embedding_text(slot: &EmbeddingSlot) -> String {
    match slot {
        EmbeddingSlot::Unresolved | EmbeddingSlot::Resolved(_) => "[CLIP]".to_string(),
        EmbeddingSlot::Named(n) => n.to_string(),
    }
}

/// Renders a program in the canonical format.
///
/// The inverse of [`super::parse_program`] on canonical text. Resolved slots
/// emit their literal markers; their payloads are not representable in text.
pub fn emit_program(p: &SceneProgram) -> String {
    let mut out = String::with_capacity(512 + 96 * p.objects.len());
    let values = p.attributes.numeric_values();
    for (i, name) in SETTER_NAMES.iter().enumerate() {
        out.push_str(name);
        out.push('(');
        if i < values.len() {
            out.push_str(&format_float3(values[i]));
        } else {
            out.push_str(&embedding_text(&p.attributes.ground));
        }
        out.push_str(")\n");
    }
    for obj in &p.objects {
        out.push_str("add(");
        if let Some(px) = obj.pixels {
            out.push_str(&format!("pixels={px}, "));
        }
        out.push_str(&format!(
            "loc=({}, {}, {}), height={}, rotation=[ROT], appearance={})\n",
            format_float3(obj.loc[0]),
            format_float3(obj.loc[1]),
            format_float3(obj.loc[2]),
            format_float3(obj.height),
            embedding_text(&obj.appearance),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_decimal_rounding() {
        assert_eq!(format_float3(0.9814999), "0.981");
        assert_eq!(format_float3(88.13), "88.130");
        assert_eq!(format_float3(-22.591), "-22.591");
        assert_eq!(format_float3(0.0), "0.000");
    }

    #[test]
    fn ties_round_half_to_even() {
        // 1.0625 and 1.1875 are exact in binary; their third decimal is a
        // true tie.
        assert_eq!(format_float3(1.0625), "1.062");
        assert_eq!(format_float3(1.1875), "1.188");
    }
}
