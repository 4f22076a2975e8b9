//! TLS plumbing: rustls config loading for broker and clients, plus a
//! dev CA generator for local deployments and tests. Certificate
//! issuance against a public CA is deployment work outside this crate.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustls::pki_types::{CertificateDer, PrivateKeyDer, ServerName};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TlsError {
    #[error("tls file error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad tls material: {0}")]
    Material(String),

    #[error("certificate generation failed: {0}")]
    Generate(String),
}

fn load_certs(path: &Path) -> Result<Vec<CertificateDer<'static>>, TlsError> {
    let data = std::fs::read(path)?;
    let certs: Vec<_> = rustls_pemfile::certs(&mut data.as_slice())
        .collect::<Result<_, _>>()
        .map_err(|e| TlsError::Material(format!("{}: {e}", path.display())))?;
    if certs.is_empty() {
        return Err(TlsError::Material(format!(
            "{}: no certificates found",
            path.display()
        )));
    }
    Ok(certs)
}

fn load_key(path: &Path) -> Result<PrivateKeyDer<'static>, TlsError> {
    let data = std::fs::read(path)?;
    rustls_pemfile::private_key(&mut data.as_slice())
        .map_err(|e| TlsError::Material(format!("{}: {e}", path.display())))?
        .ok_or_else(|| TlsError::Material(format!("{}: no private key found", path.display())))
}

/// Server-side config from certificate chain and key files.
pub fn server_config(cert: &Path, key: &Path) -> Result<Arc<rustls::ServerConfig>, TlsError> {
    let certs = load_certs(cert)?;
    let key = load_key(key)?;
    let config = rustls::ServerConfig::builder()
        .with_no_client_auth()
        .with_single_cert(certs, key)
        .map_err(|e| TlsError::Material(e.to_string()))?;
    Ok(Arc::new(config))
}

/// Client-side config trusting exactly the given root.
pub fn client_config(ca: &Path) -> Result<Arc<rustls::ClientConfig>, TlsError> {
    let mut roots = rustls::RootCertStore::empty();
    for cert in load_certs(ca)? {
        roots
            .add(cert)
            .map_err(|e| TlsError::Material(e.to_string()))?;
    }
    let config = rustls::ClientConfig::builder()
        .with_root_certificates(roots)
        .with_no_client_auth();
    Ok(Arc::new(config))
}

/// Parse `host` (DNS name or IP literal) into a rustls server name.
pub fn server_name(host: &str) -> Result<ServerName<'static>, TlsError> {
    ServerName::try_from(host.to_string())
        .map_err(|e| TlsError::Material(format!("invalid server name `{host}`: {e}")))
}

/// Paths written by [`generate_dev_tls`].
#[derive(Debug, Clone)]
pub struct DevTlsFiles {
    pub ca: PathBuf,
    pub cert: PathBuf,
    pub key: PathBuf,
}

/// Generate a throwaway CA plus a server certificate for the given
/// subject names (DNS names or IP literals) and write all three PEM
/// files into `dir`.
pub fn generate_dev_tls(dir: &Path, sans: &[String]) -> Result<DevTlsFiles, TlsError> {
    std::fs::create_dir_all(dir)?;
    let gen_err = |e: rcgen::Error| TlsError::Generate(e.to_string());

    let mut ca_params = rcgen::CertificateParams::new(Vec::new()).map_err(gen_err)?;
    ca_params.is_ca = rcgen::IsCa::Ca(rcgen::BasicConstraints::Unconstrained);
    ca_params
        .distinguished_name
        .push(rcgen::DnType::CommonName, "mqttz dev ca");
    let ca_key = rcgen::KeyPair::generate().map_err(gen_err)?;
    let ca_cert = ca_params.self_signed(&ca_key).map_err(gen_err)?;

    let server_params = rcgen::CertificateParams::new(sans.to_vec()).map_err(gen_err)?;
    let server_key = rcgen::KeyPair::generate().map_err(gen_err)?;
    let server_cert = server_params
        .signed_by(&server_key, &ca_cert, &ca_key)
        .map_err(gen_err)?;

    let files = DevTlsFiles {
        ca: dir.join("ca.pem"),
        cert: dir.join("server-cert.pem"),
        key: dir.join("server-key.pem"),
    };
    std::fs::write(&files.ca, ca_cert.pem())?;
    std::fs::write(&files.cert, server_cert.pem())?;
    std::fs::write(&files.key, server_key.serialize_pem())?;
    Ok(files)
}
