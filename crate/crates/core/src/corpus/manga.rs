use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use roxmltree::{Document, Node};

use super::{
    BoundingBox, Book, CorpusError, DialogueLine, FaceRegion, LineKind, Page, BOOK_SCHEMA_VERSION,
    UNKNOWN_SPEAKER,
};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Load a book from a Manga109-layout dataset root.
///
/// Pages are defined by the image files; annotation `<page>` elements attach
/// frames, faces and text to them. Text elements become dialogue lines. Their
/// reading order is the `order` attribute when present, else document order
/// within the page. Speakers come from a `speaker` attribute on the text
/// element or from `speaker_to_text` links in `dialog/<book>.xml`.
pub fn load_book(root: &Path, book_id: &str) -> Result<Book, CorpusError> {
    let annotation_path = root.join("annotations").join(format!("{book_id}.xml"));
    if !annotation_path.is_file() {
        return Err(CorpusError::MissingAnnotation(annotation_path));
    }
    let annotation = read_to_string(&annotation_path)?;
    let images = scan_images(root, book_id)?;

    let speaker_links = {
        let dialog_path = root.join("dialog").join(format!("{book_id}.xml"));
        if dialog_path.is_file() {
            parse_speaker_links(&read_to_string(&dialog_path)?)?
        } else {
            HashMap::new()
        }
    };

    let doc = Document::parse(&annotation).map_err(|e| CorpusError::MalformedAnnotation {
        locus: format!("{book_id}.xml {}", e.pos()),
        message: e.to_string(),
    })?;
    let locus = |node: Node| {
        let pos = doc.text_pos_at(node.range().start);
        format!("{book_id}.xml {}:{} <{}>", pos.row, pos.col, node.tag_name().name())
    };

    let characters: HashMap<String, String> = doc
        .descendants()
        .filter(|n| n.has_tag_name("character"))
        .filter_map(|n| {
            let id = n.attribute("id")?;
            Some((id.to_string(), n.attribute("name").unwrap_or(id).to_string()))
        })
        .collect();
    let resolve = |id: &str| characters.get(id).cloned().unwrap_or_else(|| id.to_string());

    let mut pages: Vec<Page> = images
        .iter()
        .enumerate()
        .map(|(i, rel)| Page {
            page_index: i,
            image_ref: rel.clone(),
            width: 0,
            height: 0,
            face_regions: Vec::new(),
        })
        .collect();
    let mut dims_from_annotation = vec![false; pages.len()];

    struct RawLine {
        source_id: String,
        page_index: usize,
        speaker: Option<String>,
        text: String,
        explicit_order: Option<u32>,
        position: u32,
        kind: LineKind,
        locus: String,
    }
    let mut raw_lines: Vec<RawLine> = Vec::new();
    let mut source_text_count = 0usize;
    let mut seen_pages: HashMap<usize, String> = HashMap::new();

    for page_node in doc.descendants().filter(|n| n.has_tag_name("page")) {
        let page_index: usize = parse_attr(page_node, "index", &locus)?;
        if let Some(prev) = seen_pages.insert(page_index, locus(page_node)) {
            return Err(CorpusError::MalformedAnnotation {
                locus: locus(page_node),
                message: format!("page {page_index} annotated twice (first at {prev})"),
            });
        }
        let texts: Vec<Node> = page_node.children().filter(|n| n.has_tag_name("text")).collect();
        source_text_count += texts.len();
        if page_index >= pages.len() {
            if let Some(text) = texts.first() {
                return Err(CorpusError::DanglingReference {
                    text_id: text.attribute("id").unwrap_or("?").to_string(),
                    message: format!(
                        "dialogue on page {page_index} of a {}-page book",
                        pages.len()
                    ),
                });
            }
            return Err(CorpusError::MissingImage(format!("{book_id} page {page_index}")));
        }

        if let (Some(w), Some(h)) = (page_node.attribute("width"), page_node.attribute("height")) {
            let page = &mut pages[page_index];
            page.width = parse_num(w, page_node, "width", &locus)?;
            page.height = parse_num(h, page_node, "height", &locus)?;
            dims_from_annotation[page_index] = true;
        }

        for face in page_node.children().filter(|n| n.has_tag_name("face")) {
            let bbox = parse_box(face, &locus)?;
            let region_id = face
                .attribute("id")
                .ok_or_else(|| CorpusError::MalformedAnnotation {
                    locus: locus(face),
                    message: "face without id".into(),
                })?
                .to_string();
            pages[page_index].face_regions.push(FaceRegion {
                region_id,
                bbox,
                character: face.attribute("character").map(resolve),
            });
        }

        for (position, text) in texts.into_iter().enumerate() {
            let source_id = text
                .attribute("id")
                .ok_or_else(|| CorpusError::MalformedAnnotation {
                    locus: locus(text),
                    message: "text without id".into(),
                })?
                .to_string();
            let body = text.text().map(str::trim).unwrap_or_default().to_string();
            if body.is_empty() {
                return Err(CorpusError::MalformedAnnotation {
                    locus: locus(text),
                    message: format!("text {source_id} is empty"),
                });
            }
            let explicit_order = match text.attribute("order") {
                Some(v) => Some(parse_num(v, text, "order", &locus)?),
                None => None,
            };
            let kind = match text.attribute("kind") {
                None | Some("speech") => LineKind::Speech,
                Some("narration") => LineKind::Narration,
                Some(other) => {
                    return Err(CorpusError::MalformedAnnotation {
                        locus: locus(text),
                        message: format!("unknown text kind {other:?}"),
                    })
                }
            };
            raw_lines.push(RawLine {
                speaker: text.attribute("speaker").map(resolve),
                source_id,
                page_index,
                text: body,
                explicit_order,
                position: position as u32,
                kind,
                locus: locus(text),
            });
        }
    }

    for (i, page) in pages.iter_mut().enumerate() {
        if !dims_from_annotation[i] {
            let path = root.join(&page.image_ref);
            let (w, h) = image::image_dimensions(&path).map_err(|e| {
                CorpusError::MalformedAnnotation {
                    locus: page.image_ref.clone(),
                    message: format!("unreadable page image: {e}"),
                }
            })?;
            page.width = w;
            page.height = h;
        }
        for face in &page.face_regions {
            if !face.bbox.fits_within(page.width, page.height) {
                return Err(CorpusError::MalformedAnnotation {
                    locus: format!("{book_id} page {i}, face {}", face.region_id),
                    message: format!(
                        "face box {:?} outside {}x{} image",
                        face.bbox, page.width, page.height
                    ),
                });
            }
        }
        page.face_regions.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    }

    let known_text_ids: HashMap<&str, ()> =
        raw_lines.iter().map(|l| (l.source_id.as_str(), ())).collect();
    for text_id in speaker_links.keys() {
        if !known_text_ids.contains_key(text_id.as_str()) {
            return Err(CorpusError::DanglingReference {
                text_id: text_id.clone(),
                message: "speaker link points to a text element that does not exist".into(),
            });
        }
    }

    // Reading order: explicit attribute, else position in the page's text list.
    let mut by_key: BTreeMap<(usize, u32), RawLine> = BTreeMap::new();
    for line in raw_lines {
        let order = line.explicit_order.unwrap_or(line.position);
        let key = (line.page_index, order);
        if let Some(existing) = by_key.get(&key) {
            return Err(CorpusError::MalformedAnnotation {
                locus: line.locus,
                message: format!(
                    "reading order {order} on page {} already used by text {}",
                    line.page_index, existing.source_id
                ),
            });
        }
        by_key.insert(key, line);
    }

    let mut ids_seen = HashMap::new();
    let mut dialogue = Vec::with_capacity(by_key.len());
    for (i, ((page_index, reading_order), raw)) in by_key.into_iter().enumerate() {
        if ids_seen.insert(raw.source_id.clone(), ()).is_some() {
            return Err(CorpusError::MalformedAnnotation {
                locus: raw.locus,
                message: format!("duplicate text id {}", raw.source_id),
            });
        }
        let speaker = speaker_links
            .get(&raw.source_id)
            .map(|id| resolve(id))
            .or(raw.speaker)
            .unwrap_or_else(|| UNKNOWN_SPEAKER.to_string());
        dialogue.push(DialogueLine {
            line_id: i as u32 + 1,
            source_id: raw.source_id,
            page_index,
            speaker,
            text: raw.text,
            reading_order,
            kind: raw.kind,
        });
    }

    if dialogue.len() != source_text_count {
        return Err(CorpusError::MalformedAnnotation {
            locus: format!("{book_id}.xml"),
            message: format!(
                "parsed {} dialogue lines from {source_text_count} text elements",
                dialogue.len()
            ),
        });
    }

    let book = Book {
        schema_version: BOOK_SCHEMA_VERSION,
        book_id: book_id.to_string(),
        pages,
        dialogue,
    };
    book.validate()?;
    Ok(book)
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Page images named by zero-padded index; indices must run 0..n without gaps.
fn scan_images(root: &Path, book_id: &str) -> Result<Vec<String>, CorpusError> {
    let dir = root.join("images").join(book_id);
    let entries = fs::read_dir(&dir).map_err(|_| CorpusError::MissingImage(dir.display().to_string()))?;
    let mut by_index: BTreeMap<usize, String> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|source| CorpusError::Io {
            path: dir.clone(),
            source,
        })?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(index) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        let file_name = entry.file_name().to_string_lossy().into_owned();
        by_index.insert(index, format!("images/{book_id}/{file_name}"));
    }
    if by_index.is_empty() {
        return Err(CorpusError::MissingImage(dir.display().to_string()));
    }
    for (expected, index) in by_index.keys().enumerate() {
        if *index != expected {
            return Err(CorpusError::MissingImage(format!("{book_id} page {expected}")));
        }
    }
    Ok(by_index.into_values().collect())
}

/// Parse `speaker_to_text` links (Manga109Dialog layout) into text id -> speaker id.
fn parse_speaker_links(xml: &str) -> Result<HashMap<String, String>, CorpusError> {
    let doc = Document::parse(xml).map_err(|e| CorpusError::MalformedAnnotation {
        locus: format!("dialog file {}", e.pos()),
        message: e.to_string(),
    })?;
    let mut links = HashMap::new();
    for node in doc.descendants().filter(|n| n.has_tag_name("speaker_to_text")) {
        let pos = doc.text_pos_at(node.range().start);
        let (Some(text_id), Some(speaker_id)) =
            (node.attribute("text_id"), node.attribute("speaker_id"))
        else {
            return Err(CorpusError::MalformedAnnotation {
                locus: format!("dialog file {}:{}", pos.row, pos.col),
                message: "speaker_to_text needs text_id and speaker_id".into(),
            });
        };
        links.insert(text_id.to_string(), speaker_id.to_string());
    }
    Ok(links)
}

fn parse_attr<T: std::str::FromStr>(
    node: Node,
    name: &str,
    locus: &impl Fn(Node) -> String,
) -> Result<T, CorpusError> {
    let raw = node
        .attribute(name)
        .ok_or_else(|| CorpusError::MalformedAnnotation {
            locus: locus(node),
            message: format!("missing attribute {name}"),
        })?;
    parse_num(raw, node, name, locus)
}

fn parse_num<T: std::str::FromStr>(
    raw: &str,
    node: Node,
    name: &str,
    locus: &impl Fn(Node) -> String,
) -> Result<T, CorpusError> {
    raw.trim()
        .parse()
        .map_err(|_| CorpusError::MalformedAnnotation {
            locus: locus(node),
            message: format!("attribute {name}={raw:?} is not a non-negative integer"),
        })
}

fn parse_box(node: Node, locus: &impl Fn(Node) -> String) -> Result<BoundingBox, CorpusError> {
    let xmin: u32 = parse_attr(node, "xmin", locus)?;
    let ymin: u32 = parse_attr(node, "ymin", locus)?;
    let xmax: u32 = parse_attr(node, "xmax", locus)?;
    let ymax: u32 = parse_attr(node, "ymax", locus)?;
    if xmax <= xmin || ymax <= ymin {
        return Err(CorpusError::MalformedAnnotation {
            locus: locus(node),
            message: "empty region box".into(),
        });
    }
    Ok(BoundingBox {
        x: xmin,
        y: ymin,
        width: xmax - xmin,
        height: ymax - ymin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn write_book(dir: &Path, pages: usize, xml: &str) -> PathBuf {
        fs::create_dir_all(dir.join("annotations")).unwrap();
        fs::create_dir_all(dir.join("images/b")).unwrap();
        fs::write(dir.join("annotations/b.xml"), xml).unwrap();
        for i in 0..pages {
            let img = image::RgbImage::from_pixel(40, 60, image::Rgb([200, 200, 200]));
            img.save(dir.join(format!("images/b/{i:03}.png"))).unwrap();
        }
        dir.to_path_buf()
    }

    #[test]
    fn missing_annotation() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_book(dir.path(), "nope"),
            Err(CorpusError::MissingAnnotation(_))
        ));
    }

    #[test]
    fn malformed_xml_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let root = write_book(dir.path(), 1, "<book><pages><page index=\"0\"></pages></book>");
        match load_book(&root, "b") {
            Err(CorpusError::MalformedAnnotation { locus, .. }) => assert!(locus.contains("b.xml")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unattributed_lines_get_unknown_speaker_and_dimensions_from_image() {
        let dir = tempfile::tempdir().unwrap();
        let xml = r#"<book><pages><page index="0">
            <face id="f1" xmin="1" ymin="1" xmax="20" ymax="30"/>
            <text id="t1" xmin="0" ymin="0" xmax="5" ymax="5">Hi.</text>
        </page></pages></book>"#;
        let root = write_book(dir.path(), 2, xml);
        let book = load_book(&root, "b").unwrap();
        assert_eq!(book.pages.len(), 2);
        assert_eq!((book.pages[0].width, book.pages[0].height), (40, 60));
        assert_eq!(book.dialogue[0].speaker, UNKNOWN_SPEAKER);
        assert!(book.pages[1].face_regions.is_empty());
    }

    #[test]
    fn face_outside_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let xml = r#"<book><pages><page index="0" width="40" height="60">
            <face id="f1" xmin="30" ymin="1" xmax="50" ymax="30"/>
        </page></pages></book>"#;
        let root = write_book(dir.path(), 1, xml);
        assert!(matches!(
            load_book(&root, "b"),
            Err(CorpusError::MalformedAnnotation { .. })
        ));
    }

    #[test]
    fn duplicate_reading_order_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let xml = r#"<book><pages><page index="0" width="40" height="60">
            <text id="t1" order="0" xmin="0" ymin="0" xmax="5" ymax="5">A</text>
            <text id="t2" order="0" xmin="0" ymin="0" xmax="5" ymax="5">B</text>
        </page></pages></book>"#;
        let root = write_book(dir.path(), 1, xml);
        assert!(matches!(
            load_book(&root, "b"),
            Err(CorpusError::MalformedAnnotation { .. })
        ));
    }

    #[test]
    fn dangling_speaker_link() {
        let dir = tempfile::tempdir().unwrap();
        let xml = r#"<book><pages><page index="0" width="40" height="60">
            <text id="t1" xmin="0" ymin="0" xmax="5" ymax="5">A</text>
        </page></pages></book>"#;
        let root = write_book(dir.path(), 1, xml);
        fs::create_dir_all(root.join("dialog")).unwrap();
        fs::write(
            root.join("dialog/b.xml"),
            r#"<book><speaker_to_text id="s" text_id="t9" speaker_id="c1"/></book>"#,
        )
        .unwrap();
        assert!(matches!(
            load_book(&root, "b"),
            Err(CorpusError::DanglingReference { .. })
        ));
    }

    #[test]
    fn gap_in_page_images() {
        let dir = tempfile::tempdir().unwrap();
        let root = write_book(dir.path(), 2, "<book><pages/></book>");
        fs::rename(root.join("images/b/001.png"), root.join("images/b/002.png")).unwrap();
        assert!(matches!(load_book(&root, "b"), Err(CorpusError::MissingImage(_))));
    }
}
