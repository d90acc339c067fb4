//! Webhook payload signing: hex-encoded HMAC-SHA256 over the raw request
//! body, carried in the `X-Signature` header.

use hmac::{Hmac, Mac};
use sha2::Sha256;

pub const SIGNATURE_HEADER: &str = "x-signature";

pub fn sign(body: &[u8], secret: &str) -> String {
    let mut mac =
        Hmac::<Sha256>::new_from_slice(secret.as_bytes()).expect("hmac accepts any key length");
    mac.update(body);
    hex::encode(mac.finalize().into_bytes())
}

pub fn verify(body: &[u8], secret: &str, signature_hex: &str) -> bool {
    let Ok(given) = hex::decode(signature_hex) else {
        return false;
    };
    let mut mac =
        Hmac::<Sha256>::new_from_slice(secret.as_bytes()).expect("hmac accepts any key length");
    mac.update(body);
    mac.verify_slice(&given).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_signature_verifies_and_tampering_breaks_it() {
        let body = br#"{"interview_id":1000,"recording_path":"/tmp/corpus"}"#;
        let sig = sign(body, "secret-1");
        assert!(verify(body, "secret-1", &sig));

        let mut tampered = body.to_vec();
        tampered[10] ^= 1;
        assert!(!verify(&tampered, "secret-1", &sig));
        assert!(!verify(body, "other-secret", &sig));
        assert!(!verify(body, "secret-1", "not-hex"));
    }
}
