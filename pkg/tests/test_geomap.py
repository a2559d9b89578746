import io

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from lib import config
from lib.corpus import TweetRecord
from lib.errors import DuplicateConflict, SchemaError
from lib.geomap import (
    COORDINATES, PROFILE_TEXT, STATE_NAMES, CountyMapping, Gazetteer, UserCountyAssignment,
    assign_user_county, keep_earliest, load_gazetteer, load_polygons, map_coordinates,
    map_profile_location, map_record, merge_assignments,
)

SQUARES = (
    "99001\t0\t0,0;0,1;1,1;1,0\n"
    "99002\t0\t0,1;0,2;1,2;1,1\n"
)


@pytest.fixture(scope='module')
def bundled():
    return load_gazetteer(config.BUNDLED_GAZETTEER)


@pytest.fixture
def squares():
    return load_polygons(io.StringIO(SQUARES))


def test_load_gazetteer_lookup():
    g = load_gazetteer(io.StringIO("philadelphia\tPA\t42101\n"))
    assert g.lookup_city('philadelphia', 'PA') == '42101'


def test_conflicting_duplicate_rejected():
    text = "springfield\tIL\t17167\nspringfield\tIL\t17001\n"
    with pytest.raises(DuplicateConflict):
        load_gazetteer(io.StringIO(text))


def test_agreeing_duplicate_allowed():
    g = load_gazetteer(io.StringIO("springfield\tIL\t17167\nSpringfield\tIL\t17167\n"))
    assert len(g) == 1


def test_empty_gazetteer_is_valid():
    g = load_gazetteer(io.StringIO(""))
    assert len(g) == 0
    assert map_profile_location("Philadelphia, PA", g) is None


@pytest.mark.parametrize("text", [
    "philadelphia\tPA\n",
    "philadelphia\tXX\t42101\n",
    "philadelphia\tPA\t4210\n",
])
def test_gazetteer_schema_errors(text):
    with pytest.raises(SchemaError):
        load_gazetteer(io.StringIO(text))


def test_point_inside_polygon(squares):
    assert map_coordinates(0.5, 0.5, squares) == '99001'
    assert map_coordinates(0.5, 1.5, squares) == '99002'


def test_point_outside_all_polygons(squares):
    assert map_coordinates(5.0, 5.0, squares) is None
    assert map_coordinates(0.5, -0.5, squares) is None


def test_shared_edge_goes_to_smallest_fips(squares):
    assert map_coordinates(0.5, 1.0, squares) == '99001'
    assert map_coordinates(1.0, 1.0, squares) == '99001'


def test_polygon_with_hole():
    text = ("99003\t0\t0,0;0,4;4,4;4,0;0,0\n"
            "99003\t1\t1,1;1,3;3,3;3,1\n")
    g = load_polygons(io.StringIO(text))
    assert map_coordinates(0.5, 0.5, g) == '99003'
    assert map_coordinates(2.0, 2.0, g) is None


def test_degenerate_ring_rejected():
    with pytest.raises(SchemaError):
        load_polygons(io.StringIO("99001\t0\t0,0;1,1;0,0\n"))


def test_profile_city_state(bundled):
    assert map_profile_location("Philadelphia, PA", bundled) == '42101'
    assert map_profile_location("  philadelphia ,   pa!! ", bundled) == '42101'


def test_profile_full_state_name(bundled):
    assert map_profile_location("Philadelphia, Pennsylvania", bundled) == '42101'


def test_profile_county_pattern(bundled):
    assert map_profile_location("Allegheny County, PA", bundled) == '42003'


@pytest.mark.parametrize("text", ["philadelphia", "Mars", "", None, "Philadelphia, Narnia",
                                  "Philadelphia, OH", ", PA"])
def test_profile_unmapped(bundled, text):
    assert map_profile_location(text, bundled) is None


def bundled_rows():
    rows = []
    with open(config.BUNDLED_GAZETTEER, encoding='utf-8') as f:
        for raw in f:
            if raw.strip() and not raw.startswith('#'):
                rows.append(raw.rstrip('\n').split('\t'))
    return rows


def test_every_bundled_fixture_maps(bundled):
    rows = bundled_rows()
    assert rows
    for city, state, fips in rows:
        assert map_profile_location(f"{city}, {state}", bundled) == fips, city


bare_names = st.one_of(
    st.sampled_from([row[0] for row in bundled_rows()]),
    st.sampled_from(sorted(STATE_NAMES)),
    st.text(alphabet=st.characters(blacklist_characters=','), max_size=40),
)


@given(name=bare_names)
def test_bare_names_never_map(name):
    g = load_gazetteer(config.BUNDLED_GAZETTEER)
    assert map_profile_location(name, g) is None


def test_fuzz_ten_thousand_bare_city_names(bundled):
    cities = [row[0] for row in bundled_rows()]
    mapped = 0
    for i in range(10000):
        name = cities[i % len(cities)]
        variants = (name, name.upper(), f"  {name}  ", f"{name}!!", f"{name} {i}")
        mapped += sum(map_profile_location(v, bundled) is not None for v in variants[:1 + i % 5])
    assert mapped == 0


def rec(tweet_id, user, t, coords=None, profile=None):
    return TweetRecord(tweet_id, user, t, 'text', coords, profile)


def test_map_record_prefers_coordinates(squares):
    squares.city_entries[('philadelphia', 'PA')] = '42101'
    mapping = map_record(rec('1', 'u', 0, (0.5, 0.5), 'Philadelphia, PA'), squares)
    assert mapping == CountyMapping('99001', COORDINATES)
    mapping = map_record(rec('2', 'u', 0, (9.0, 9.0), 'Philadelphia, PA'), squares)
    assert mapping == CountyMapping('42101', PROFILE_TEXT)
    assert map_record(rec('3', 'u', 0), squares) is None


def test_earliest_tweet_wins():
    out = assign_user_county([(rec('a', 'u1', 5), '99001'), (rec('b', 'u1', 3), '99002')])
    assert out['u1'].fips == '99002'
    assert out['u1'].evidence_timestamp == 3


def test_single_tweet():
    assert assign_user_county([(rec('a', 'u1', 5, (0, 0)), '99001')])['u1'].assigned_from == COORDINATES


def test_timestamp_tie_broken_by_tweet_id():
    out = assign_user_county([(rec('002', 'u1', 7), '99002'), (rec('001', 'u1', 7), '99001')])
    assert out['u1'].fips == '99001'


mapped_streams = st.lists(
    st.tuples(st.sampled_from(['u1', 'u2', 'u3']), st.integers(0, 5),
              st.sampled_from(['99001', '99002', '99003'])),
    min_size=1, max_size=30,
)


@given(stream=mapped_streams, data=st.data())
def test_assignment_is_order_insensitive_and_mergeable(stream, data):
    items = [(rec(f"{i:03d}", u, t), f) for i, (u, t, f) in enumerate(stream)]
    shuffled = data.draw(st.permutations(items))
    cut = data.draw(st.integers(0, len(items)))
    whole = assign_user_county(items)
    assert assign_user_county(shuffled) == whole
    parts = merge_assignments(assign_user_county(shuffled[cut:]), assign_user_county(shuffled[:cut]))
    assert parts == whole


def test_keep_earliest():
    homes = {}
    keep_earliest(homes, UserCountyAssignment('u1', '99001', COORDINATES, 5, 'b'))
    keep_earliest(homes, UserCountyAssignment('u1', '99002', COORDINATES, 9, 'a'))
    assert homes['u1'].fips == '99001'
    keep_earliest(homes, UserCountyAssignment('u1', '99003', PROFILE_TEXT, 5, 'a'))
    assert homes['u1'].fips == '99003'


def test_assignment_source_does_not_affect_equality():
    a = UserCountyAssignment('u1', '99001', COORDINATES, 5, 'b')
    assert a == UserCountyAssignment('u1', '99001', PROFILE_TEXT, 5, 'b')


def test_assign_user_county_updates_in_place():
    homes = assign_user_county([(rec('b', 'u1', 5), '99001')])
    out = assign_user_county([(rec('a', 'u1', 2), CountyMapping('99002', PROFILE_TEXT)),
                              (rec('c', 'u2', 9), '99001')], into=homes)
    assert out is homes
    assert homes['u1'].fips == '99002'
    assert homes['u1'].assigned_from == PROFILE_TEXT
    assert set(homes) == {'u1', 'u2'}


def test_mapping_cache_follows_new_entries(squares):
    assert map_coordinates(5.5, 5.5, squares) is None
    assert map_profile_location('Pittsburgh, PA', squares) is None
    load_polygons(io.StringIO("99003\t0\t5,5;5,6;6,6;6,5\n"), squares)
    squares.city_entries[('pittsburgh', 'PA')] = '42003'
    assert map_coordinates(5.5, 5.5, squares) == '99003'
    assert map_profile_location('Pittsburgh, PA', squares) == '42003'


def test_mapping_cache_repeats_answers(squares):
    first = [map_coordinates(0.5, x / 10, squares) for x in range(25)]
    assert [map_coordinates(0.5, x / 10, squares) for x in range(25)] == first
    assert first[5] == '99001' and first[15] == '99002' and first[24] is None


def test_added_ring_updates_edges():
    g = load_polygons(io.StringIO("99001\t0\t0,0;0,1;1,1;1,0\n"))
    assert map_coordinates(2.5, 2.5, g) is None
    shape = g.county_polygons['99001']
    shape.edges()
    shape.add_ring(np.array([[2.0, 2.0], [2.0, 3.0], [3.0, 3.0], [3.0, 2.0], [2.0, 2.0]]))
    assert shape.contains(2.5, 2.5)
    assert shape.contains(0.5, 0.5)


def test_gazetteer_defaults_include_states():
    g = Gazetteer()
    assert g.state_entries['pennsylvania'] == '42'
    assert g.state_entries['pa'] == '42'
