"""Regenerate the derived test fixtures from the records below.

    python fixtures/build_fixtures.py

Writes E-utilities replay files, the MeSH descriptor subset, the evaluation
corpus and the synthetic token embeddings.  All researchers and articles are
invented; tree numbers are a hand-picked subset for tests, not an NLM extract.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from scholarprofile.corpus import Corpus, ProfileDoc, Researcher, Variant, save_corpus, tokenize
from scholarprofile.pubmed import EutilsClient, FetchPolicy, SearchQuery

HERE = Path(__file__).resolve().parent
REFERENCE_YEAR = 2024
RECENCY_YEARS = 10
CREATED_AT = "2024-06-01T00:00:00Z"
EMBED_DIM = 12

ROSTER = [
    ("r01", "Alice M Harper", "Example University School of Medicine"),
    ("r02", "Daniel K Osei", "Example University School of Medicine"),
    ("r03", "Priya Raman", "Example Institute of Public Health"),
    ("r04", "Tomas Lind", "Example Institute of Public Health"),
]

A = ("Harper", "Alice M")
D = ("Osei", "Daniel K")
P = ("Raman", "Priya")


def others(*names):
    return [tuple(n.split(" ", 1)) for n in names]


# pmid, year (int) or MedlineDate (str), title, abstract segments [(label, text)], mesh, authors
ARTICLES = {
    "r01": [
        ("31000001", 2022, "Transformer models for extracting medication information from clinical notes",
         [(None, "We trained transformer language models on annotated clinical notes to extract "
                 "medication names, doses and frequencies. Natural language processing of "
                 "electronic health records reached high precision on held-out notes.")],
         ["Natural Language Processing", "Electronic Health Records", "Deep Learning", "Humans"],
         [A] + others("Lee Min", "Costa Rita")),
        ("31000002", 2021, "Phenotyping heart failure with machine learning over structured and unstructured data",
         [(None, "Machine learning phenotypes for heart failure combined diagnosis codes with "
                 "concepts extracted from clinical notes. Text features improved phenotype "
                 "accuracy across two hospitals.")],
         ["Machine Learning", "Heart Failure", "Electronic Health Records", "Humans"],
         others("Nguyen Bao", "Ortiz Ana", "Kim Joon", "Patel Sana", "Weber Jonas") + [A]),
        ("31000003", 2019, "Retrieving cancer cohort criteria from pathology text",
         [("BACKGROUND", "Cohort discovery for oncology trials depends on details buried in pathology reports."),
          ("METHODS", "We built a natural language processing pipeline for information retrieval over pathology text."),
          ("RESULTS", "The pipeline recovered eligibility criteria for most neoplasm cohorts.")],
         ["Natural Language Processing", "Information Storage and Retrieval", "Neoplasms"],
         others("Brown Tess") + [A] + others("Ali Omar")),
        ("31000004", 2017, "Automated de-identification of radiology reports",
         [(None, "Rule-based and statistical de-identification removed protected health information "
                 "from radiology reports while keeping clinical content readable.")],
         ["Confidentiality", "Natural Language Processing", "Radiology"],
         [A] + others("Garcia Luis")),
        ("31000005", 2020, "Early warning scores for sepsis in emergency departments",
         [(None, "A multicenter machine learning study of early sepsis alerts.")],
         ["Sepsis", "Machine Learning"],
         others("Ito Ken", "Moreau Claire", "Silva Joao", "Novak Eva") + [A]
         + others("Hughes Ian", "Singh Ravi", "Olsen Mia", "Rossi Gina", "Khan Zara")),
        ("31000006", 2012, "Section segmentation of discharge summaries",
         [(None, "Section headers in discharge summaries were detected with conditional random fields.")],
         ["Natural Language Processing", "Patient Discharge"],
         [A] + others("Lee Min")),
        ("31000007", "2018 Jan-Feb", "Ontology-based mapping of clinical concepts",
         [(None, "Clinical concepts from free text were mapped to the Unified Medical Language System "
                 "using semantic similarity and ontology structure.")],
         ["Unified Medical Language System", "Semantics", "Natural Language Processing"],
         others("Park Ji", "Chen Wei", "Dubois Marc", "Fischer Anna", "Rao Dev", "Zhou Lin",
                "Haddad Sami", "Evans Kate") + [A]),
        ("31000008", 2023, "Large language models in clinical documentation: a commentary",
         [],
         ["Natural Language Processing", "Documentation"],
         [A]),
    ],
    "r02": [
        ("21000001", 2023, "Exome sequencing in hereditary breast cancer families",
         [(None, "Exome sequencing of 312 families with hereditary breast cancer identified germline "
                 "mutations beyond BRCA1 and BRCA2, informing genetic testing panels.")],
         ["Exome Sequencing", "Breast Neoplasms", "Germ-Line Mutation", "Humans", "Female"],
         [D] + others("Mensah Ama", "Quinn Liam")),
        ("21000002", 2022, "Tumor mutational burden and immunotherapy response in lung cancer",
         [(None, "Tumor mutational burden measured from targeted panels predicted response to "
                 "immune checkpoint immunotherapy in advanced lung cancer.")],
         ["Lung Neoplasms", "Immunotherapy", "Biomarkers, Tumor", "Mutation"],
         others("Adeyemi Tolu", "Byrne Sean") + [D] + others("Keller Nina")),
        ("21000003", 2020, "Circulating tumor DNA for colorectal cancer surveillance",
         [(None, "Serial liquid biopsy measurements of circulating tumor DNA detected colorectal "
                 "cancer recurrence months before imaging.")],
         ["Circulating Tumor DNA", "Colorectal Neoplasms", "Liquid Biopsy"],
         [D] + others("Lopez Marta")),
        ("21000004", 2019, "Classifying BRCA1 variants of uncertain significance",
         [(None, "Functional assays and population data reclassified BRCA1 variants of uncertain "
                 "significance reported by clinical genetic testing laboratories.")],
         ["BRCA1 Protein", "Genetic Variation", "Breast Neoplasms", "Genetic Testing"],
         others("Moore Ellen", "Frank Otto", "Yilmaz Deniz", "Sato Yui") + [D]),
        ("21000005", 2016, "Genomics in precision oncology clinics",
         [(None, "A genomics tumor board reviewed sequencing results for precision medicine decisions.")],
         ["Genomics", "Precision Medicine", "Neoplasms"],
         [D] + others("Boateng Kofi", "Ward Amy", "Hall Ben", "Ng Iris") + [D]),
        ("21000006", 2021, "Somatic alterations in pancreatic cancer",
         [(None, "Whole-genome DNA sequence analysis profiled somatic alterations in pancreatic cancer.")],
         ["Pancreatic Neoplasms", "Sequence Analysis, DNA"],
         others("Andersen Lars", "Bianchi Sofia", "Cohen Dan", "Dias Rui", "Eze Chidi", "Fox Ruth",
                "Gomez Pilar") + [D] + others("Ivanova Olga", "Jensen Per")),
        ("21000007", 2020, "Malaria parasite genomics in Ghana",
         [(None, "Parasite genome surveillance tracked drug resistance markers.")],
         ["Malaria", "Genomics"],
         [("Osei", "Kwame")] + others("Asante Yaw")),
    ],
    "r03": [
        ("41000001", 2024, "Fine particulate matter and pediatric asthma emergency visits",
         [(None, "Daily particulate matter concentrations were associated with pediatric asthma "
                 "emergency department visits in a case-crossover analysis.")],
         ["Air Pollution", "Asthma", "Child", "Emergency Service, Hospital", "Particulate Matter"],
         [P] + others("Torres Elena")),
        ("41000002", 2022, "Wildfire smoke exposure and respiratory outcomes in a regional cohort",
         [(None, "Cohort members exposed to wildfire smoke had more respiratory tract disease visits.")],
         ["Smoke", "Wildfires", "Respiratory Tract Diseases", "Cohort Studies"],
         others("Young Grace") + [P]),
        ("41000003", 2021, "Heat waves and mortality: a multi-city time-series study",
         [(None, "Extreme heat increased all-cause mortality, with larger effects in older adults "
                 "and under climate change projections.")],
         ["Hot Temperature", "Mortality", "Climate Change"],
         [P] + others("Bell Noah", "Cruz Ana")),
        ("41000004", 2018, "Traffic-related nitrogen dioxide and birth weight",
         [(None, "Residential nitrogen dioxide from vehicle emissions was associated with low birth "
                 "weight in a statewide birth cohort.")],
         ["Nitrogen Dioxide", "Vehicle Emissions", "Infant, Low Birth Weight", "Pregnancy"],
         others("Howard Ann", "Ito Sora") + [P]),
        ("41000005", 2015, "Spatial models for environmental exposure assessment",
         [(None, "Land-use regression and geographic information systems estimated environmental "
                 "exposure at residential addresses.")],
         ["Environmental Exposure", "Spatial Analysis", "Geographic Information Systems"],
         [P] + others("Diaz Hugo")),
        ("41000006", 2014, "Ozone monitoring networks",
         [(None, "Monitor placement affects ozone exposure estimates.")],
         ["Ozone", "Environmental Monitoring"],
         [P]),
    ],
    "r04": [],
}

# name -> tree numbers
MESH = {
    "Natural Language Processing": ["L01.224.050.375.580"],
    "Electronic Health Records": ["E05.318.308.940.968.249.500", "L01.453.245.945.249.500"],
    "Deep Learning": ["G17.035.250.500.250", "L01.224.050.375.530.250"],
    "Humans": ["B01.050.150.900.649.313.988.400.112.400.400"],
    "Machine Learning": ["G17.035.250.500", "L01.224.050.375.530"],
    "Heart Failure": ["C14.280.434"],
    "Information Storage and Retrieval": ["L01.470"],
    "Neoplasms": ["C04"],
    "Confidentiality": ["I01.880.604.473.650.500"],
    "Radiology": ["H02.403.740"],
    "Sepsis": ["C01.757"],
    "Patient Discharge": ["N02.421.143.827"],
    "Unified Medical Language System": ["L01.453.245.667.800"],
    "Semantics": ["L01.143.506.423.796"],
    "Documentation": ["L01.178.682.099"],
    "Exome Sequencing": ["E05.393.760.700.500"],
    "Breast Neoplasms": ["C04.588.180", "C17.800.090.500"],
    "Germ-Line Mutation": ["G05.365.590.700"],
    "Female": [],
    "Lung Neoplasms": ["C04.588.894.797.520", "C08.381.540"],
    "Immunotherapy": ["E02.095.465"],
    "Biomarkers, Tumor": ["D23.101.140"],
    "Mutation": ["G05.365.590"],
    "Circulating Tumor DNA": ["D13.444.308.176"],
    "Colorectal Neoplasms": ["C04.588.274.476.411.307"],
    "Liquid Biopsy": ["E01.370.225.500.384.500"],
    "BRCA1 Protein": ["D12.776.157.057.112"],
    "Genetic Variation": ["G05.365"],
    "Genetic Testing": ["E05.393.420"],
    "Genomics": ["H01.158.273.343.385"],
    "Precision Medicine": ["E02.190.888"],
    "Pancreatic Neoplasms": ["C04.588.274.761"],
    "Sequence Analysis, DNA": ["E05.393.760.700"],
    "Malaria": ["C01.610.752.250.800.600"],
    "Air Pollution": ["G03.230.100", "N06.850.460.350.100"],
    "Asthma": ["C08.127.108", "C08.381.495.108"],
    "Child": ["M01.060.406"],
    "Emergency Service, Hospital": ["N02.278.388.493"],
    "Particulate Matter": ["D27.720.470.410.610"],
    "Smoke": ["D27.720.470.410.640"],
    "Wildfires": ["G16.500.275.157.049.600"],
    "Respiratory Tract Diseases": ["C08"],
    "Cohort Studies": ["E05.318.372.500.750.500"],
    "Hot Temperature": ["G01.374.458"],
    "Mortality": ["E05.318.308.985.550", "N01.224.625"],
    "Climate Change": ["G16.500.175.374.500"],
    "Nitrogen Dioxide": ["D01.625.550.550"],
    "Vehicle Emissions": ["D27.720.470.410.700"],
    "Infant, Low Birth Weight": ["M01.060.703.520"],
    "Pregnancy": ["G08.686.784.769"],
    "Environmental Exposure": ["G03.850.310"],
    "Spatial Analysis": ["E05.318.740.872"],
    "Geographic Information Systems": ["L01.313.500.750.300.188.400"],
    "Ozone": ["D01.268.556.645"],
    "Environmental Monitoring": ["G03.850.780"],
    "Learning Health System": ["N04.452.860.500"],
    "Health Policy": ["N03.349.650"],
    "Medical Oncology": ["H02.403.810.457"],
    "Epidemiology": ["H02.403.340"],
}


def article_xml(pmid, year, title, segments, mesh, authors) -> str:
    if isinstance(year, int):
        date = f"<Year>{year}</Year><Month>Mar</Month>"
    else:
        date = f"<MedlineDate>{escape(year)}</MedlineDate>"
    abstract = ""
    if segments:
        parts = "".join(
            f'<AbstractText Label="{label}">{escape(text)}</AbstractText>' if label
            else f"<AbstractText>{escape(text)}</AbstractText>" for label, text in segments)
        abstract = f"<Abstract>{parts}</Abstract>"
    author_xml = "".join(
        f"<Author><LastName>{escape(last)}</LastName><ForeName>{escape(fore)}</ForeName></Author>"
        for last, fore in authors)
    mesh_xml = "".join(
        f'<MeshHeading><DescriptorName MajorTopicYN="N">{escape(m)}</DescriptorName></MeshHeading>'
        for m in mesh)
    return (
        "<PubmedArticle><MedlineCitation Status=\"MEDLINE\">"
        f"<PMID Version=\"1\">{pmid}</PMID><Article>"
        f"<Journal><JournalIssue><PubDate>{date}</PubDate></JournalIssue></Journal>"
        f"<ArticleTitle>{escape(title)}</ArticleTitle>{abstract}"
        f"<AuthorList CompleteYN=\"Y\">{author_xml}</AuthorList></Article>"
        f"<MeshHeadingList>{mesh_xml}</MeshHeadingList></MedlineCitation></PubmedArticle>\n")


def esearch_xml(ids) -> str:
    id_xml = "".join(f"<Id>{i}</Id>" for i in ids)
    return (f"<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<eSearchResult><Count>{len(ids)}</Count>"
            f"<RetMax>{len(ids)}</RetMax><RetStart>0</RetStart><IdList>{id_xml}</IdList>"
            "</eSearchResult>\n")


def build_eutils(directory: Path) -> None:
    if directory.exists():
        shutil.rmtree(directory)
    directory.mkdir(parents=True)
    client = EutilsClient(FetchPolicy(api_key=None), transport=object())
    for rid, name, affiliation in ROSTER:
        query = SearchQuery(name, REFERENCE_YEAR - RECENCY_YEARS + 1, REFERENCE_YEAR, affiliation)
        params = {"db": "pubmed", "term": query.term(), "datetype": "pdat",
                  "mindate": str(query.date_from), "maxdate": str(query.date_to),
                  "retstart": "0", "retmax": "200"}
        articles = ARTICLES[rid]
        ids = [a[0] for a in articles]
        write(directory, client.url("esearch.fcgi", params), esearch_xml(ids))
        if ids:
            body = ("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<PubmedArticleSet>\n"
                    + "".join(article_xml(*a) for a in articles) + "</PubmedArticleSet>\n")
            fetch = {"db": "pubmed", "id": ",".join(ids), "retmode": "xml"}
            write(directory, client.url("efetch.fcgi", fetch), body)


def write(directory: Path, url: str, body: str) -> None:
    (directory / f"{hashlib.sha256(url.encode('utf-8')).hexdigest()}.xml").write_text(body, "utf-8")


def build_mesh(path: Path) -> None:
    records = []
    for i, (name, trees) in enumerate(sorted(MESH.items()), 1):
        tree_xml = "".join(f"<TreeNumber>{t}</TreeNumber>" for t in trees)
        tree_list = f"<TreeNumberList>{tree_xml}</TreeNumberList>" if trees else ""
        records.append(
            f"  <DescriptorRecord DescriptorClass=\"1\"><DescriptorUI>D9{i:05d}</DescriptorUI>"
            f"<DescriptorName><String>{escape(name)}</String></DescriptorName>{tree_list}"
            "</DescriptorRecord>\n")
    path.write_text("<?xml version=\"1.0\"?>\n<DescriptorRecordSet LanguageCode=\"eng\">\n"
                    + "".join(records) + "</DescriptorRecordSet>\n", "utf-8")


def profile_text(rid: str, variant: Variant) -> str:
    return (HERE / "profiles" / f"{rid}__{variant.value}.txt").read_text("utf-8").strip()


def build_corpus(path: Path) -> None:
    corpus = Corpus()
    for rid, name, affiliation in ROSTER[:3]:
        corpus.researchers.append(Researcher(rid, name, affiliation,
                                             human_profile=profile_text(rid, Variant.HUMAN)))
        for v in Variant:
            corpus.upsert_profile(ProfileDoc(rid, v, profile_text(rid, v), CREATED_AT))
    save_corpus(corpus, path)


def token_vector(token: str) -> list[float]:
    seed = int(hashlib.sha256(token.encode("utf-8")).hexdigest()[:16], 16)
    vec = np.random.default_rng(seed).standard_normal(EMBED_DIM)
    return [round(float(x), 6) for x in vec]


def build_embeddings(directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for rid, _, _ in ROSTER[:3]:
        for v in Variant:
            tokens = ["[CLS]", *tokenize(profile_text(rid, v)).tokens, "[SEP]"]
            payload = {"dim": EMBED_DIM, "tokens": tokens,
                       "vectors": [token_vector(t) for t in tokens]}
            (directory / f"{rid}__{v.value}.json").write_text(
                json.dumps(payload, separators=(",", ":")) + "\n", "utf-8")


def build_roster(path: Path) -> None:
    lines = ["id,name,affiliation,human_profile_path"]
    for rid, name, affiliation in ROSTER:
        ref = f"profiles/{rid}__Human.txt" if (HERE / "profiles" / f"{rid}__Human.txt").exists() else ""
        lines.append(f"{rid},{name},{affiliation},{ref}")
    path.write_text("\n".join(lines) + "\n", "utf-8")


def main() -> None:
    os.chdir(HERE)
    build_eutils(HERE / "eutils")
    build_mesh(HERE / "mesh" / "desc_subset.xml")
    build_corpus(HERE / "corpus" / "profiles.jsonl")
    build_embeddings(HERE / "embeddings")
    build_roster(HERE / "roster.csv")


if __name__ == "__main__":
    main()
