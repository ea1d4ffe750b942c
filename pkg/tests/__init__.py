"""Тесты уточнения сегментации"""
