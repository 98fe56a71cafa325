//! HTTP/1.1 message codec: framing, request-head parsing and serialization.
//!
//! Only `Content-Length` framed bodies are supported; chunked transfer
//! coding is rejected as malformed.

use crate::model::HttpFields;

const MAX_HEAD: usize = 64 * 1024;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum HttpError {
    #[error("malformed start line")]
    StartLine,
    #[error("malformed header line {0}")]
    Header(usize),
    #[error("invalid Content-Length")]
    ContentLength,
    #[error("unsupported transfer coding")]
    TransferCoding,
    #[error("head exceeds {MAX_HEAD} bytes")]
    HeadTooLarge,
    #[error("message incomplete")]
    Incomplete,
}

/// Byte offset just past the blank line that ends the head, if present.
fn head_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|i| i + 4)
}

struct Head<'a> {
    start: [&'a [u8]; 3],
    headers: Vec<(&'a [u8], &'a [u8])>,
    len: usize,
}

fn trim_ows(mut v: &[u8]) -> &[u8] {
    while let [b' ' | b'\t', rest @ ..] = v {
        v = rest;
    }
    while let [rest @ .., b' ' | b'\t'] = v {
        v = rest;
    }
    v
}

fn parse_head(buf: &[u8]) -> Result<Head<'_>, HttpError> {
    let end = match head_end(buf) {
        Some(e) => e,
        None if buf.len() > MAX_HEAD => return Err(HttpError::HeadTooLarge),
        None => return Err(HttpError::Incomplete),
    };
    // Keep the CRLF of the last header line; drop the final empty piece.
    let head = &buf[..end - 2];
    let mut lines = head[..head.len() - 1].split(|&b| b == b'\n');
    let first = lines.next().ok_or(HttpError::StartLine)?;
    let first = first.strip_suffix(b"\r").ok_or(HttpError::StartLine)?;
    let mut parts = first.splitn(3, |&b| b == b' ');
    let a = parts.next().ok_or(HttpError::StartLine)?;
    let b = parts.next().ok_or(HttpError::StartLine)?;
    let c = parts.next().ok_or(HttpError::StartLine)?;
    if a.is_empty() || b.is_empty() || c.is_empty() {
        return Err(HttpError::StartLine);
    }
    let mut headers = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.strip_suffix(b"\r").ok_or(HttpError::Header(i + 1))?;
        let colon = line
            .iter()
            .position(|&b| b == b':')
            .ok_or(HttpError::Header(i + 1))?;
        let name = &line[..colon];
        if name.is_empty() || name.iter().any(|b| b.is_ascii_whitespace()) {
            return Err(HttpError::Header(i + 1));
        }
        headers.push((name, trim_ows(&line[colon + 1..])));
    }
    Ok(Head {
        start: [a, b, c],
        headers,
        len: end,
    })
}

fn content_length(headers: &[(&[u8], &[u8])]) -> Result<usize, HttpError> {
    let mut len = None;
    for (n, v) in headers {
        if n.eq_ignore_ascii_case(b"transfer-encoding") {
            return Err(HttpError::TransferCoding);
        }
        if n.eq_ignore_ascii_case(b"content-length") {
            let parsed: usize = std::str::from_utf8(v)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or(HttpError::ContentLength)?;
            if len.is_some_and(|l| l != parsed) {
                return Err(HttpError::ContentLength);
            }
            len = Some(parsed);
        }
    }
    Ok(len.unwrap_or(0))
}

/// Length of the first complete message in `buf`, or `None` while more
/// bytes are needed.
pub fn message_len(buf: &[u8]) -> Result<Option<usize>, HttpError> {
    let head = match parse_head(buf) {
        Ok(h) => h,
        Err(HttpError::Incomplete) => return Ok(None),
        Err(e) => return Err(e),
    };
    let total = head.len + content_length(&head.headers)?;
    Ok((buf.len() >= total).then_some(total))
}

fn is_token(s: &[u8]) -> bool {
    !s.is_empty()
        && s.iter()
            .all(|b| b.is_ascii_alphanumeric() || b"!#$%&'*+-.^_`|~".contains(b))
}

/// Parses one complete request into head fields and body bytes.
pub fn parse_request(buf: &[u8]) -> Result<(HttpFields, Vec<u8>), HttpError> {
    let head = parse_head(buf)?;
    let [method, target, version] = head.start;
    if !is_token(method) || !version.starts_with(b"HTTP/1.") {
        return Err(HttpError::StartLine);
    }
    let body_len = content_length(&head.headers)?;
    let body_end = head.len + body_len;
    if buf.len() < body_end {
        return Err(HttpError::Incomplete);
    }
    let headers: Vec<(Vec<u8>, Vec<u8>)> = head
        .headers
        .iter()
        .map(|(n, v)| (n.to_vec(), v.to_vec()))
        .collect();
    let host = headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(b"host"))
        .map(|(_, v)| v.clone())
        .unwrap_or_default();
    Ok((
        HttpFields {
            method: String::from_utf8_lossy(method).into_owned(),
            url_path: target.to_vec(),
            version: version.to_vec(),
            host,
            headers,
        },
        buf[head.len..body_end].to_vec(),
    ))
}

/// Serializes a request. The `Host` header carries `fields.host` and
/// `Content-Length` carries the body length; everything else is emitted in
/// stored order.
pub fn write_request(fields: &HttpFields, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + body.len());
    out.extend_from_slice(fields.method.as_bytes());
    out.push(b' ');
    out.extend_from_slice(&fields.url_path);
    out.push(b' ');
    out.extend_from_slice(&fields.version);
    out.extend_from_slice(b"\r\n");
    let mut saw_len = false;
    for (n, v) in &fields.headers {
        out.extend_from_slice(n);
        out.extend_from_slice(b": ");
        if n.eq_ignore_ascii_case(b"host") {
            out.extend_from_slice(&fields.host);
        } else if n.eq_ignore_ascii_case(b"content-length") {
            saw_len = true;
            out.extend_from_slice(body.len().to_string().as_bytes());
        } else {
            out.extend_from_slice(v);
        }
        out.extend_from_slice(b"\r\n");
    }
    if !saw_len && !body.is_empty() {
        out.extend_from_slice(b"Content-Length: ");
        out.extend_from_slice(body.len().to_string().as_bytes());
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(b"\r\n");
    out.extend_from_slice(body);
    out
}

/// Request with just a Host header (and Content-Length for a body).
pub fn simple_request(method: &str, path: &str, host: &str, body: &[u8]) -> Vec<u8> {
    let fields = HttpFields {
        method: method.to_owned(),
        url_path: path.as_bytes().to_vec(),
        version: b"HTTP/1.1".to_vec(),
        host: host.as_bytes().to_vec(),
        headers: vec![(b"Host".to_vec(), host.as_bytes().to_vec())],
    };
    write_request(&fields, body)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub headers: Vec<(Vec<u8>, Vec<u8>)>,
    pub body: Vec<u8>,
}

pub fn parse_response(buf: &[u8]) -> Result<Response, HttpError> {
    let head = parse_head(buf)?;
    let [version, status, _reason] = head.start;
    if !version.starts_with(b"HTTP/1.") {
        return Err(HttpError::StartLine);
    }
    let status = std::str::from_utf8(status)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(HttpError::StartLine)?;
    let body_len = content_length(&head.headers)?;
    if buf.len() < head.len + body_len {
        return Err(HttpError::Incomplete);
    }
    Ok(Response {
        status,
        headers: head
            .headers
            .iter()
            .map(|(n, v)| (n.to_vec(), v.to_vec()))
            .collect(),
        body: buf[head.len..head.len + body_len].to_vec(),
    })
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        _ => "",
    }
}

pub fn write_response(status: u16, extra: &[(&str, &str)], body: &[u8]) -> Vec<u8> {
    let mut out = format!("HTTP/1.1 {} {}\r\n", status, reason_phrase(status)).into_bytes();
    for (n, v) in extra {
        out.extend_from_slice(format!("{n}: {v}\r\n").as_bytes());
    }
    out.extend_from_slice(format!("Content-Length: {}\r\n\r\n", body.len()).as_bytes());
    out.extend_from_slice(body);
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn parses_simple_get() {
        let (f, body) = parse_request(b"GET /svc/a HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
        assert_eq!(f.method, "GET");
        assert_eq!(f.url_path, b"/svc/a");
        assert_eq!(f.host, b"x");
        assert!(body.is_empty());
    }

    #[test]
    fn content_length_body() {
        let raw = b"POST /p HTTP/1.1\r\nHost: x\r\nContent-Length: 5\r\n\r\nhelloEXTRA";
        assert_eq!(message_len(raw).unwrap(), Some(raw.len() - 5));
        let (_, body) = parse_request(raw).unwrap();
        assert_eq!(body, b"hello");
        assert_eq!(message_len(&raw[..raw.len() - 7]).unwrap(), None);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_request(b"\x00\x01 nonsense\r\n\r\n").is_err());
        assert_eq!(
            parse_request(b"GET / HTTP/1.1\r\nBad Header\r\n\r\n"),
            Err(HttpError::Header(1))
        );
        assert_eq!(
            parse_request(b"GET / HTTP/1.1\r\nTransfer-Encoding: chunked\r\n\r\n"),
            Err(HttpError::TransferCoding)
        );
    }

    #[test]
    fn host_rewrite_changes_only_host_value() {
        let raw = b"GET /a HTTP/1.1\r\nHost: x\r\nAccept: */*\r\n\r\n";
        let (mut f, body) = parse_request(raw).unwrap();
        f.host = b"y".to_vec();
        let out = write_request(&f, &body);
        assert_eq!(out, b"GET /a HTTP/1.1\r\nHost: y\r\nAccept: */*\r\n\r\n");
    }

    #[test]
    fn response_round_trip() {
        let raw = write_response(404, &[], b"nope");
        let r = parse_response(&raw).unwrap();
        assert_eq!((r.status, r.body.as_slice()), (404, &b"nope"[..]));
    }

    fn token() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z0-9-]{0,11}"
    }

    prop_compose! {
        fn canonical_request()(
            method in prop::sample::select(vec!["GET", "POST", "PUT", "DELETE"]),
            path in "/[a-z0-9/]{0,20}",
            host in "[a-z]{1,10}",
            extra in prop::collection::vec((token(), "[ -~&&[^ ]]([ -~]{0,10}[!-~])?"), 0..4),
            body in prop::collection::vec(any::<u8>(), 0..64),
        ) -> Vec<u8> {
            let mut s = format!("{method} {path} HTTP/1.1\r\nHost: {host}\r\n").into_bytes();
            for (n, v) in extra {
                if n.eq_ignore_ascii_case("content-length")
                    || n.eq_ignore_ascii_case("host")
                    || n.eq_ignore_ascii_case("transfer-encoding")
                {
                    continue;
                }
                s.extend_from_slice(format!("{n}: {v}\r\n").as_bytes());
            }
            if !body.is_empty() {
                s.extend_from_slice(format!("Content-Length: {}\r\n", body.len()).as_bytes());
            }
            s.extend_from_slice(b"\r\n");
            s.extend_from_slice(&body);
            s
        }
    }

    proptest! {
        #[test]
        fn canonical_requests_round_trip(raw in canonical_request()) {
            let (f, body) = parse_request(&raw).unwrap();
            prop_assert_eq!(write_request(&f, &body), raw);
        }
    }
}
